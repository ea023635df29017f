#include "sqs/autodiff/graph.hpp"

#include "sqs/core/error.hpp"
#include "sqs/core/parallel.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace sqs::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

// Row blocks have a fixed size so the summation order never depends on the
// thread count.
constexpr std::size_t kGemmBlock = 256;

// Below this many multiply-adds plain loops beat the blocked product.
bool small(std::size_t rows, std::size_t m, std::size_t p) { return rows * m * p < 4096; }

template <class F>
void for_row_blocks(std::size_t rows, F&& body) {
    const std::size_t blocks = (rows + kGemmBlock - 1) / kGemmBlock;
    parallel_for(blocks, [&](std::size_t blk) {
        const std::size_t r0 = blk * kGemmBlock;
        body(r0, std::min(rows, r0 + kGemmBlock) - r0);
    });
}

// C[rows,p] += A[rows,m] * B[m,p]
void matmul_nn(const double* a, const double* b, double* c, std::size_t rows, std::size_t m, std::size_t p) {
    if (small(rows, m, p)) {
        for (std::size_t i = 0; i < rows; ++i) {
            double* crow = c + i * p;
            for (std::size_t k = 0; k < m; ++k) {
                const double av = a[i * m + k];
                const double* brow = b + k * p;
                for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
            }
        }
        return;
    }
    const MapC bm(b, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(p));
    for_row_blocks(rows, [&](std::size_t r0, std::size_t n) {
        Map(c + r0 * p, n, p).noalias() += MapC(a + r0 * m, n, m) * bm;
    });
}

// C[rows,p] += A[rows,m] * B[p,m]^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t rows, std::size_t m, std::size_t p) {
    if (small(rows, m, p)) {
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < p; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < m; ++k) s += a[i * m + k] * b[j * m + k];
                c[i * p + j] += s;
            }
        }
        return;
    }
    const MapC bm(b, static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(m));
    for_row_blocks(rows, [&](std::size_t r0, std::size_t n) {
        Map(c + r0 * p, n, p).noalias() += MapC(a + r0 * m, n, m) * bm.transpose();
    });
}

// C[m,p] += A[rows,m]^T * B[rows,p]
void matmul_tn(const double* a, const double* b, double* c, std::size_t rows, std::size_t m, std::size_t p) {
    if (small(rows, m, p)) {
        for (std::size_t i = 0; i < rows; ++i) {
            const double* brow = b + i * p;
            for (std::size_t k = 0; k < m; ++k) {
                const double av = a[i * m + k];
                double* crow = c + k * p;
                for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
            }
        }
        return;
    }
    const MapC am(a, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(m));
    const MapC bm(b, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(p));
    for_row_blocks(m, [&](std::size_t r0, std::size_t n) {
        Map(c + r0 * p, n, p).noalias() += am.middleCols(r0, n).transpose() * bm;
    });
}

bool is_suffix(const Shape& whole, const Shape& tail) {
    if (tail.size() > whole.size()) return false;
    return std::equal(tail.begin(), tail.end(), whole.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

std::int64_t as_index(double v, std::size_t rows) {
    const auto idx = static_cast<std::int64_t>(std::llround(v));
    if (static_cast<double>(idx) != v || idx < -1 || idx >= static_cast<std::int64_t>(rows)) {
        throw InvalidArgument("gather index " + std::to_string(v) + " outside [-1, " + std::to_string(rows) + ")");
    }
    return idx;
}

} // namespace

const char* op_name(OpKind kind) {
    switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Multiply: return "multiply";
    case OpKind::Scale: return "scale";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Relu: return "relu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Concat: return "concat";
    case OpKind::Gather: return "gather";
    case OpKind::GatherDynamic: return "gather_dynamic";
    case OpKind::L1: return "l1";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::MeanAxis: return "mean_axis";
    case OpKind::Reshape: return "reshape";
    case OpKind::Slice: return "slice";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Custom: return "custom";
    }
    return "?";
}

Graph::Scope::Scope(Graph& g, const std::string& name) : graph_(g), previous_(g.scope_.size()) {
    graph_.scope_.push_back(name);
}

Graph::Scope::~Scope() { graph_.scope_.resize(previous_); }

std::string Graph::label_for(const std::string& what) const {
    std::string out;
    for (const auto& s : scope_) {
        out += s;
        out += '.';
    }
    return out + what;
}

void Graph::shape_fail(const std::string& op, const std::string& message) const {
    throw ShapeError("node #" + std::to_string(nodes_.size()) + " (" + op + " '" + label_for(op) + "'): " + message);
}

Graph::Node& Graph::at(NodeRef n) {
    if (n.id >= nodes_.size()) throw InvalidArgument("invalid node reference");
    return nodes_[n.id];
}

const Graph::Node& Graph::at(NodeRef n) const {
    if (n.id >= nodes_.size()) throw InvalidArgument("invalid node reference");
    return nodes_[n.id];
}

NodeRef Graph::push(Node node) {
    for (auto in : node.inputs) {
        if (in.id >= nodes_.size()) shape_fail(op_name(node.kind), "input refers to a node of another graph");
        node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
    }
    if (node.label.empty()) node.label = label_for(op_name(node.kind));
    if (node.kind != OpKind::Input && node.kind != OpKind::Parameter && node.kind != OpKind::Constant) {
        node.value = Array(node.shape);
    }
    nodes_.push_back(std::move(node));
    evaluated_ = false;
    return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeRef Graph::input(const std::string& name, Shape shape, bool differentiable) {
    if (named_.count(name)) throw InvalidArgument("duplicate node name '" + name + "'");
    Node n;
    n.kind = OpKind::Input;
    n.shape = shape;
    n.label = name;
    n.value = Array(std::move(shape));
    n.requires_grad = differentiable;
    auto ref = push(std::move(n));
    named_[name] = ref;
    return ref;
}

NodeRef Graph::parameter(const std::string& name, Array init, bool trainable) {
    const std::string full = label_for(name);
    if (named_.count(full)) throw InvalidArgument("duplicate parameter '" + full + "'");
    Node n;
    n.kind = OpKind::Parameter;
    n.shape = init.shape();
    n.label = full;
    n.value = std::move(init);
    n.trainable = trainable;
    n.requires_grad = trainable;
    auto ref = push(std::move(n));
    named_[full] = ref;
    parameters_.push_back(ref);
    return ref;
}

NodeRef Graph::constant(Array value) {
    Node n;
    n.kind = OpKind::Constant;
    n.shape = value.shape();
    n.value = std::move(value);
    return push(std::move(n));
}

NodeRef Graph::matmul(NodeRef a, NodeRef b, bool transpose_b) {
    const Shape& sa = at(a).shape;
    const Shape& sb = at(b).shape;
    if (sa.size() < 2 || sb.size() < 2) shape_fail("matmul", "operands must have rank >= 2");
    const std::size_t m = sa.back();
    const std::size_t bm = transpose_b ? sb.back() : sb[sb.size() - 2];
    const std::size_t p = transpose_b ? sb[sb.size() - 2] : sb.back();
    if (m != bm) {
        shape_fail("matmul", "inner dimensions differ: " + shape_string(sa) + " x " + shape_string(sb) +
                                 (transpose_b ? "^T" : ""));
    }
    if (sb.size() != 2) {
        if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
            shape_fail("matmul", "batch dimensions differ: " + shape_string(sa) + " x " + shape_string(sb));
        }
    }
    Node n;
    n.kind = OpKind::MatMul;
    n.inputs = {a, b};
    n.transpose_b = transpose_b;
    n.shape = sa;
    n.shape.back() = p;
    return push(std::move(n));
}

NodeRef Graph::add(NodeRef a, NodeRef b) {
    if (!is_suffix(at(a).shape, at(b).shape)) {
        shape_fail("add", "cannot broadcast " + shape_string(at(b).shape) + " onto " + shape_string(at(a).shape));
    }
    Node n;
    n.kind = OpKind::Add;
    n.inputs = {a, b};
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeRef Graph::multiply(NodeRef a, NodeRef b) {
    if (!is_suffix(at(a).shape, at(b).shape)) {
        shape_fail("multiply",
                   "cannot broadcast " + shape_string(at(b).shape) + " onto " + shape_string(at(a).shape));
    }
    Node n;
    n.kind = OpKind::Multiply;
    n.inputs = {a, b};
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeRef Graph::scale(NodeRef a, double factor) {
    Node n;
    n.kind = OpKind::Scale;
    n.inputs = {a};
    n.shape = at(a).shape;
    n.scalar = factor;
    return push(std::move(n));
}

NodeRef Graph::sigmoid(NodeRef a) {
    Node n;
    n.kind = OpKind::Sigmoid;
    n.inputs = {a};
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeRef Graph::relu(NodeRef a) {
    Node n;
    n.kind = OpKind::Relu;
    n.inputs = {a};
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeRef Graph::softmax(NodeRef a) {
    if (at(a).shape.empty()) shape_fail("softmax", "rank-0 operand");
    Node n;
    n.kind = OpKind::Softmax;
    n.inputs = {a};
    n.shape = at(a).shape;
    return push(std::move(n));
}

NodeRef Graph::layer_norm(NodeRef a, double eps) {
    if (at(a).shape.empty()) shape_fail("layer_norm", "rank-0 operand");
    Node n;
    n.kind = OpKind::LayerNorm;
    n.inputs = {a};
    n.shape = at(a).shape;
    n.scalar = eps;
    return push(std::move(n));
}

NodeRef Graph::concat(const std::vector<NodeRef>& parts) {
    if (parts.empty()) shape_fail("concat", "no operands");
    Shape out = at(parts.front()).shape;
    if (out.empty()) shape_fail("concat", "rank-0 operand");
    out.back() = 0;
    for (auto p : parts) {
        const Shape& s = at(p).shape;
        if (s.size() != out.size() || !std::equal(s.begin(), s.end() - 1, out.begin())) {
            shape_fail("concat", "leading dimensions differ: " + shape_string(s));
        }
        out.back() += s.back();
    }
    Node n;
    n.kind = OpKind::Concat;
    n.inputs = parts;
    n.shape = out;
    return push(std::move(n));
}

NodeRef Graph::gather(NodeRef a, std::vector<std::int64_t> indices, Shape index_shape) {
    const Shape& sa = at(a).shape;
    if (sa.empty()) shape_fail("gather", "rank-0 operand");
    if (shape_size(index_shape) != indices.size()) shape_fail("gather", "index shape does not match index count");
    for (auto i : indices) {
        if (i < -1 || i >= static_cast<std::int64_t>(sa[0])) {
            shape_fail("gather", "index " + std::to_string(i) + " outside [-1, " + std::to_string(sa[0]) + ")");
        }
    }
    Node n;
    n.kind = OpKind::Gather;
    n.inputs = {a};
    n.shape = index_shape;
    n.shape.insert(n.shape.end(), sa.begin() + 1, sa.end());
    n.indices = std::move(indices);
    return push(std::move(n));
}

NodeRef Graph::gather(NodeRef a, NodeRef indices) {
    const Shape& sa = at(a).shape;
    if (sa.empty()) shape_fail("gather_dynamic", "rank-0 operand");
    Node n;
    n.kind = OpKind::GatherDynamic;
    n.inputs = {a, indices};
    n.shape = at(indices).shape;
    n.shape.insert(n.shape.end(), sa.begin() + 1, sa.end());
    auto ref = push(std::move(n));
    nodes_[ref.id].requires_grad = nodes_[a.id].requires_grad;
    return ref;
}

NodeRef Graph::l1(NodeRef a, NodeRef b) {
    if (at(a).shape != at(b).shape) {
        shape_fail("l1", "shape mismatch " + shape_string(at(a).shape) + " vs " + shape_string(at(b).shape));
    }
    Node n;
    n.kind = OpKind::L1;
    n.inputs = {a, b};
    n.shape = {};
    return push(std::move(n));
}

NodeRef Graph::sum(NodeRef a) {
    Node n;
    n.kind = OpKind::Sum;
    n.inputs = {a};
    n.shape = {};
    return push(std::move(n));
}

NodeRef Graph::mean(NodeRef a) {
    Node n;
    n.kind = OpKind::Mean;
    n.inputs = {a};
    n.shape = {};
    return push(std::move(n));
}

NodeRef Graph::mean_axis(NodeRef a, std::size_t axis) {
    const Shape& sa = at(a).shape;
    if (axis >= sa.size()) shape_fail("mean_axis", "axis " + std::to_string(axis) + " out of range");
    Node n;
    n.kind = OpKind::MeanAxis;
    n.inputs = {a};
    n.shape = sa;
    n.shape.erase(n.shape.begin() + static_cast<std::ptrdiff_t>(axis));
    n.axis = axis;
    return push(std::move(n));
}

NodeRef Graph::reshape(NodeRef a, Shape shape) {
    if (shape_size(shape) != shape_size(at(a).shape)) {
        shape_fail("reshape", "cannot reshape " + shape_string(at(a).shape) + " to " + shape_string(shape));
    }
    Node n;
    n.kind = OpKind::Reshape;
    n.inputs = {a};
    n.shape = std::move(shape);
    return push(std::move(n));
}

NodeRef Graph::slice(NodeRef a, std::size_t begin, std::size_t end) {
    const Shape& sa = at(a).shape;
    if (sa.empty() || begin >= end || end > sa.back()) {
        shape_fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                                shape_string(sa));
    }
    Node n;
    n.kind = OpKind::Slice;
    n.inputs = {a};
    n.shape = sa;
    n.shape.back() = end - begin;
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
}

NodeRef Graph::cross_entropy(NodeRef logits, NodeRef labels) {
    const Shape& sl = at(logits).shape;
    const Shape& sy = at(labels).shape;
    if (sl.size() != 2 || sy.size() != 1 || sy[0] != sl[0]) {
        shape_fail("cross_entropy", "expected logits [N,C] and labels [N], got " + shape_string(sl) + " and " +
                                        shape_string(sy));
    }
    Node n;
    n.kind = OpKind::CrossEntropy;
    n.inputs = {logits, labels};
    n.shape = {};
    auto ref = push(std::move(n));
    nodes_[ref.id].requires_grad = nodes_[logits.id].requires_grad;
    return ref;
}

NodeRef Graph::custom(std::shared_ptr<CustomOp> op, const std::vector<NodeRef>& inputs) {
    std::vector<Shape> shapes;
    for (auto i : inputs) shapes.push_back(at(i).shape);
    Shape out;
    try {
        out = op->output_shape(shapes);
    } catch (const ShapeError& e) {
        shape_fail(op->name(), e.what());
    }
    Node n;
    n.kind = OpKind::Custom;
    n.inputs = inputs;
    n.shape = std::move(out);
    n.label = label_for(op->name());
    n.op = std::move(op);
    return push(std::move(n));
}

void Graph::evaluate(const std::map<std::string, Array>& inputs) {
    for (const auto& [name, value] : inputs) {
        auto it = named_.find(name);
        if (it == named_.end() || nodes_[it->second.id].kind != OpKind::Input) {
            throw InvalidArgument("no graph input named '" + name + "'");
        }
        Node& n = nodes_[it->second.id];
        if (value.shape() != n.shape) {
            throw ShapeError("input '" + name + "' expects shape " + shape_string(n.shape) + ", got " +
                             shape_string(value.shape()));
        }
        n.value = value;
    }
    for (auto& node : nodes_) {
        if (node.kind == OpKind::Input || node.kind == OpKind::Parameter || node.kind == OpKind::Constant) continue;
        forward_node(node);
        if (!node.value.all_finite()) {
            const auto idx = static_cast<std::size_t>(&node - nodes_.data());
            throw NumericError("non-finite output at node #" + std::to_string(idx) + " (" + op_name(node.kind) +
                               " '" + node.label + "')");
        }
    }
    evaluated_ = true;
}

void Graph::forward_node(Node& node) {
    auto in = [&](std::size_t k) -> const Array& { return nodes_[node.inputs[k].id].value; };
    Array& out = node.value;
    switch (node.kind) {
    case OpKind::MatMul: {
        const Array& a = in(0);
        const Array& b = in(1);
        out.fill(0.0);
        const std::size_t m = a.shape().back();
        const std::size_t p = out.shape().back();
        const std::size_t n = a.shape()[a.rank() - 2];
        if (b.rank() == 2) {
            const std::size_t rows = a.size() / m;
            if (node.transpose_b) matmul_nt(a.data(), b.data(), out.data(), rows, m, p);
            else matmul_nn(a.data(), b.data(), out.data(), rows, m, p);
        } else {
            const std::size_t batch = a.size() / (n * m);
            for (std::size_t s = 0; s < batch; ++s) {
                const double* pa = a.data() + s * n * m;
                const double* pb = b.data() + s * m * p;
                double* pc = out.data() + s * n * p;
                if (node.transpose_b) matmul_nt(pa, pb, pc, n, m, p);
                else matmul_nn(pa, pb, pc, n, m, p);
            }
        }
        break;
    }
    case OpKind::Add: {
        const Array& a = in(0);
        const Array& b = in(1);
        const std::size_t inner = b.size();
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i % inner];
        break;
    }
    case OpKind::Multiply: {
        const Array& a = in(0);
        const Array& b = in(1);
        const std::size_t inner = b.size();
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i % inner];
        break;
    }
    case OpKind::Scale: {
        const Array& a = in(0);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * node.scalar;
        break;
    }
    case OpKind::Sigmoid: {
        const Array& a = in(0);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = stable_sigmoid(a[i]);
        break;
    }
    case OpKind::Relu: {
        const Array& a = in(0);
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
        break;
    }
    case OpKind::Softmax: {
        const Array& a = in(0);
        const std::size_t w = node.shape.back();
        const std::size_t rows = a.size() / w;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = a.data() + r * w;
            double* y = out.data() + r * w;
            const double mx = *std::max_element(x, x + w);
            double z = 0.0;
            for (std::size_t j = 0; j < w; ++j) {
                y[j] = std::exp(x[j] - mx);
                z += y[j];
            }
            for (std::size_t j = 0; j < w; ++j) y[j] /= z;
        }
        break;
    }
    case OpKind::LayerNorm: {
        const Array& a = in(0);
        const std::size_t w = node.shape.back();
        const std::size_t rows = a.size() / w;
        node.aux.assign(rows, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = a.data() + r * w;
            double* y = out.data() + r * w;
            double mu = 0.0;
            for (std::size_t j = 0; j < w; ++j) mu += x[j];
            mu /= static_cast<double>(w);
            double var = 0.0;
            for (std::size_t j = 0; j < w; ++j) var += (x[j] - mu) * (x[j] - mu);
            var /= static_cast<double>(w);
            const double rstd = 1.0 / std::sqrt(var + node.scalar);
            node.aux[r] = rstd;
            for (std::size_t j = 0; j < w; ++j) y[j] = (x[j] - mu) * rstd;
        }
        break;
    }
    case OpKind::Concat: {
        const std::size_t w = node.shape.back();
        const std::size_t rows = out.size() / w;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            const Array& p = in(k);
            const std::size_t pw = p.shape().back();
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy_n(p.data() + r * pw, pw, out.data() + r * w + offset);
            }
            offset += pw;
        }
        break;
    }
    case OpKind::Gather:
    case OpKind::GatherDynamic: {
        const Array& a = in(0);
        const std::size_t rows = a.shape()[0];
        const std::size_t inner = a.size() / rows;
        if (node.kind == OpKind::GatherDynamic) {
            const Array& idx = in(1);
            node.indices.resize(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) node.indices[i] = as_index(idx[i], rows);
        }
        for (std::size_t i = 0; i < node.indices.size(); ++i) {
            const auto src = node.indices[i];
            double* dst = out.data() + i * inner;
            if (src < 0) std::fill_n(dst, inner, 0.0);
            else std::copy_n(a.data() + static_cast<std::size_t>(src) * inner, inner, dst);
        }
        break;
    }
    case OpKind::L1: {
        const Array& a = in(0);
        const Array& b = in(1);
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
        out[0] = a.size() ? s / static_cast<double>(a.size()) : 0.0;
        break;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
        const Array& a = in(0);
        double s = 0.0;
        for (double v : a.values()) s += v;
        out[0] = node.kind == OpKind::Mean ? s / static_cast<double>(a.size()) : s;
        break;
    }
    case OpKind::MeanAxis: {
        const Array& a = in(0);
        const Shape& sa = a.shape();
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < node.axis; ++i) outer *= sa[i];
        for (std::size_t i = node.axis + 1; i < sa.size(); ++i) inner *= sa[i];
        const std::size_t len = sa[node.axis];
        out.fill(0.0);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t l = 0; l < len; ++l) {
                const double* src = a.data() + (o * len + l) * inner;
                double* dst = out.data() + o * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        }
        const double inv = 1.0 / static_cast<double>(len);
        for (auto& v : out.values()) v *= inv;
        break;
    }
    case OpKind::Reshape: {
        const Array& a = in(0);
        std::copy(a.values().begin(), a.values().end(), out.values().begin());
        break;
    }
    case OpKind::Slice: {
        const Array& a = in(0);
        const std::size_t w = a.shape().back();
        const std::size_t ow = node.end - node.begin;
        const std::size_t rows = a.size() / w;
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(a.data() + r * w + node.begin, ow, out.data() + r * ow);
        break;
    }
    case OpKind::CrossEntropy: {
        const Array& logits = in(0);
        const Array& labels = in(1);
        const std::size_t n = logits.shape()[0];
        const std::size_t c = logits.shape()[1];
        node.aux.assign(n * c, 0.0);
        double total = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = logits.data() + r * c;
            const auto label = as_index(labels[r], c);
            if (label < 0) throw InvalidArgument("cross_entropy label -1 is not a class");
            const double mx = *std::max_element(x, x + c);
            double z = 0.0;
            for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t j = 0; j < c; ++j) node.aux[r * c + j] = std::exp(x[j] - lse);
            total += lse - x[static_cast<std::size_t>(label)];
        }
        out[0] = total / static_cast<double>(n);
        break;
    }
    case OpKind::Custom: {
        std::vector<const Array*> ptrs;
        for (auto i : node.inputs) ptrs.push_back(&nodes_[i.id].value);
        node.op->forward(ptrs, out);
        if (out.shape() != node.shape) {
            throw ShapeError("custom op '" + node.op->name() + "' produced shape " + shape_string(out.shape()));
        }
        break;
    }
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant: break;
    }
}

void Graph::backpropagate(NodeRef root) {
    backpropagate(root, Array(at(root).shape, 1.0));
}

void Graph::backpropagate(NodeRef root, const Array& seed) {
    if (!evaluated_) throw InvalidArgument("backpropagate called before evaluate");
    Node& r = at(root);
    if (seed.shape() != r.shape) {
        throw ShapeError("seed gradient shape " + shape_string(seed.shape()) + " does not match root shape " +
                         shape_string(r.shape));
    }
    for (auto& n : nodes_) {
        if (n.kind == OpKind::Parameter) n.requires_grad = n.trainable;
        else if (n.kind == OpKind::Input || n.kind == OpKind::Constant) continue;
        else {
            n.requires_grad = false;
            const std::size_t count = (n.kind == OpKind::GatherDynamic || n.kind == OpKind::CrossEntropy)
                                          ? 1
                                          : n.inputs.size();
            for (std::size_t k = 0; k < count; ++k) n.requires_grad |= nodes_[n.inputs[k].id].requires_grad;
        }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (i <= root.id && (n.requires_grad || n.kind == OpKind::Parameter)) {
            if (n.grad.shape() != n.shape) n.grad = Array(n.shape);
            else n.grad.fill(0.0);
        } else if (n.kind == OpKind::Parameter) {
            if (n.grad.shape() != n.shape) n.grad = Array(n.shape);
            else n.grad.fill(0.0);
        }
    }
    if (!r.requires_grad) return;
    r.grad = seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad) continue;
        if (n.kind == OpKind::Input || n.kind == OpKind::Parameter || n.kind == OpKind::Constant) continue;
        backward_node(n);
    }
}

void Graph::backward_node(Node& node) {
    auto in = [&](std::size_t k) -> Node& { return nodes_[node.inputs[k].id]; };
    auto needs = [&](std::size_t k) { return in(k).requires_grad; };
    const Array& g = node.grad;
    switch (node.kind) {
    case OpKind::MatMul: {
        const Array& a = in(0).value;
        const Array& b = in(1).value;
        const std::size_t m = a.shape().back();
        const std::size_t p = node.shape.back();
        const std::size_t n = a.shape()[a.rank() - 2];
        const bool shared = b.rank() == 2;
        const std::size_t batch = shared ? 1 : a.size() / (n * m);
        const std::size_t rows = shared ? a.size() / m : n;
        for (std::size_t s = 0; s < batch; ++s) {
            const double* pa = a.data() + s * rows * m;
            const double* pb = b.data() + s * m * p;
            const double* pg = g.data() + s * rows * p;
            if (needs(0)) {
                double* ga = in(0).grad.data() + s * rows * m;
                if (node.transpose_b) matmul_nn(pg, pb, ga, rows, p, m);
                else matmul_nt(pg, pb, ga, rows, p, m);
            }
            if (needs(1)) {
                double* gb = in(1).grad.data() + s * m * p;
                if (node.transpose_b) matmul_tn(pg, pa, gb, rows, p, m);
                else matmul_tn(pa, pg, gb, rows, m, p);
            }
        }
        break;
    }
    case OpKind::Add: {
        const std::size_t inner = in(1).value.size();
        if (needs(0)) {
            Array& ga = in(0).grad;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (needs(1)) {
            Array& gb = in(1).grad;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
        }
        break;
    }
    case OpKind::Multiply: {
        const Array& a = in(0).value;
        const Array& b = in(1).value;
        const std::size_t inner = b.size();
        if (needs(0)) {
            Array& ga = in(0).grad;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i % inner];
        }
        if (needs(1)) {
            Array& gb = in(1).grad;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i] * a[i];
        }
        break;
    }
    case OpKind::Scale: {
        Array& ga = in(0).grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * node.scalar;
        break;
    }
    case OpKind::Sigmoid: {
        Array& ga = in(0).grad;
        const Array& y = node.value;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
    }
    case OpKind::Relu: {
        Array& ga = in(0).grad;
        const Array& x = in(0).value;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
        break;
    }
    case OpKind::Softmax: {
        Array& ga = in(0).grad;
        const Array& y = node.value;
        const std::size_t w = node.shape.back();
        const std::size_t rows = y.size() / w;
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < w; ++j) dot += g[r * w + j] * y[r * w + j];
            for (std::size_t j = 0; j < w; ++j) ga[r * w + j] += y[r * w + j] * (g[r * w + j] - dot);
        }
        break;
    }
    case OpKind::LayerNorm: {
        Array& ga = in(0).grad;
        const Array& y = node.value;
        const std::size_t w = node.shape.back();
        const std::size_t rows = y.size() / w;
        const double inv_w = 1.0 / static_cast<double>(w);
        for (std::size_t r = 0; r < rows; ++r) {
            double mg = 0.0, mgy = 0.0;
            for (std::size_t j = 0; j < w; ++j) {
                mg += g[r * w + j];
                mgy += g[r * w + j] * y[r * w + j];
            }
            mg *= inv_w;
            mgy *= inv_w;
            const double rstd = node.aux[r];
            for (std::size_t j = 0; j < w; ++j) {
                ga[r * w + j] += rstd * (g[r * w + j] - mg - y[r * w + j] * mgy);
            }
        }
        break;
    }
    case OpKind::Concat: {
        const std::size_t w = node.shape.back();
        const std::size_t rows = g.size() / w;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            Node& p = in(k);
            const std::size_t pw = p.shape.back();
            if (p.requires_grad) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < pw; ++j) p.grad[r * pw + j] += g[r * w + offset + j];
                }
            }
            offset += pw;
        }
        break;
    }
    case OpKind::Gather:
    case OpKind::GatherDynamic: {
        Array& ga = in(0).grad;
        const std::size_t inner = in(0).value.size() / in(0).shape[0];
        for (std::size_t i = 0; i < node.indices.size(); ++i) {
            const auto src = node.indices[i];
            if (src < 0) continue;
            double* dst = ga.data() + static_cast<std::size_t>(src) * inner;
            const double* gs = g.data() + i * inner;
            for (std::size_t j = 0; j < inner; ++j) dst[j] += gs[j];
        }
        break;
    }
    case OpKind::L1: {
        const Array& a = in(0).value;
        const Array& b = in(1).value;
        const double s = g[0] / static_cast<double>(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = a[i] - b[i];
            const double sg = d > 0.0 ? s : (d < 0.0 ? -s : 0.0);
            if (needs(0)) in(0).grad[i] += sg;
            if (needs(1)) in(1).grad[i] -= sg;
        }
        break;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
        Array& ga = in(0).grad;
        const double s = node.kind == OpKind::Mean ? g[0] / static_cast<double>(ga.size()) : g[0];
        for (auto& v : ga.values()) v += s;
        break;
    }
    case OpKind::MeanAxis: {
        Array& ga = in(0).grad;
        const Shape& sa = in(0).shape;
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < node.axis; ++i) outer *= sa[i];
        for (std::size_t i = node.axis + 1; i < sa.size(); ++i) inner *= sa[i];
        const std::size_t len = sa[node.axis];
        const double inv = 1.0 / static_cast<double>(len);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t l = 0; l < len; ++l) {
                double* dst = ga.data() + (o * len + l) * inner;
                const double* src = g.data() + o * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
            }
        }
        break;
    }
    case OpKind::Reshape: {
        Array& ga = in(0).grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        break;
    }
    case OpKind::Slice: {
        Array& ga = in(0).grad;
        const std::size_t w = in(0).shape.back();
        const std::size_t ow = node.end - node.begin;
        const std::size_t rows = g.size() / ow;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < ow; ++j) ga[r * w + node.begin + j] += g[r * ow + j];
        }
        break;
    }
    case OpKind::CrossEntropy: {
        Array& ga = in(0).grad;
        const Array& labels = in(1).value;
        const std::size_t n = in(0).shape[0];
        const std::size_t c = in(0).shape[1];
        const double s = g[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
            const auto label = static_cast<std::size_t>(std::llround(labels[r]));
            for (std::size_t j = 0; j < c; ++j) {
                ga[r * c + j] += s * (node.aux[r * c + j] - (j == label ? 1.0 : 0.0));
            }
        }
        break;
    }
    case OpKind::Custom: {
        std::vector<const Array*> ptrs;
        std::vector<Array*> grads;
        for (auto i : node.inputs) {
            ptrs.push_back(&nodes_[i.id].value);
            grads.push_back(nodes_[i.id].requires_grad ? &nodes_[i.id].grad : nullptr);
        }
        node.op->backward(ptrs, node.value, g, grads);
        break;
    }
    case OpKind::Input:
    case OpKind::Parameter:
    case OpKind::Constant: break;
    }
}

const Array& Graph::value(NodeRef n) const { return at(n).value; }

const Array& Graph::gradient(NodeRef n) const {
    const Node& node = at(n);
    if (node.grad.shape() != node.shape) throw InvalidArgument("no gradient computed for " + describe(n));
    return node.grad;
}

const Shape& Graph::shape(NodeRef n) const { return at(n).shape; }

std::string Graph::describe(NodeRef n) const {
    const Node& node = at(n);
    std::ostringstream out;
    out << "node #" << n.id << " (" << op_name(node.kind) << " '" << node.label << "' " << shape_string(node.shape)
        << ")";
    return out.str();
}

NodeRef Graph::find(const std::string& name) const {
    auto it = named_.find(name);
    if (it == named_.end()) throw InvalidArgument("no node named '" + name + "'");
    return it->second;
}

bool Graph::has_parameter(const std::string& name) const {
    auto it = named_.find(name);
    return it != named_.end() && nodes_[it->second.id].kind == OpKind::Parameter;
}

std::vector<std::string> Graph::parameter_names(bool trainable_only) const {
    std::vector<std::string> names;
    for (auto p : parameters_) {
        if (!trainable_only || nodes_[p.id].trainable) names.push_back(nodes_[p.id].label);
    }
    return names;
}

const Array& Graph::parameter_value(const std::string& name) const {
    if (!has_parameter(name)) throw InvalidArgument("no parameter named '" + name + "'");
    return nodes_[named_.at(name).id].value;
}

Array& Graph::mutable_parameter(const std::string& name) {
    if (!has_parameter(name)) throw InvalidArgument("no parameter named '" + name + "'");
    evaluated_ = false;
    return nodes_[named_.at(name).id].value;
}

const Array& Graph::parameter_gradient(const std::string& name) const {
    if (!has_parameter(name)) throw InvalidArgument("no parameter named '" + name + "'");
    const Node& n = nodes_[named_.at(name).id];
    if (n.grad.shape() != n.shape) throw InvalidArgument("no gradient computed for parameter '" + name + "'");
    return n.grad;
}

bool Graph::trainable(const std::string& name) const {
    if (!has_parameter(name)) throw InvalidArgument("no parameter named '" + name + "'");
    return nodes_[named_.at(name).id].trainable;
}

void Graph::set_trainable(const std::string& name, bool trainable) {
    if (!has_parameter(name)) throw InvalidArgument("no parameter named '" + name + "'");
    nodes_[named_.at(name).id].trainable = trainable;
}

std::vector<std::pair<std::string, Array>> Graph::named_parameters() const {
    std::vector<std::pair<std::string, Array>> out;
    for (auto p : parameters_) out.emplace_back(nodes_[p.id].label, nodes_[p.id].value);
    return out;
}

std::size_t Graph::load_parameters(const std::vector<std::pair<std::string, Array>>& values, bool allow_missing) {
    std::map<std::string, const Array*> lookup;
    for (const auto& [name, value] : values) lookup[name] = &value;
    std::size_t loaded = 0;
    for (auto p : parameters_) {
        Node& n = nodes_[p.id];
        auto it = lookup.find(n.label);
        if (it == lookup.end()) {
            if (allow_missing) continue;
            throw FormatError("checkpoint has no parameter '" + n.label + "'");
        }
        if (it->second->shape() != n.shape) {
            throw FormatError("parameter '" + n.label + "' has shape " + shape_string(it->second->shape()) +
                              " in checkpoint but " + shape_string(n.shape) + " in model");
        }
        n.value = *it->second;
        ++loaded;
    }
    evaluated_ = false;
    return loaded;
}

} // namespace sqs::ad
