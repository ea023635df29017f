#include "sqs/model/layers.hpp"

#include <cmath>

namespace sqs::model {

Array normal_init(Shape shape, std::size_t fan_in, Rng& rng, double gain) {
    std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
    Array a(std::move(shape));
    for (auto& v : a.values()) v = n(rng);
    return a;
}

NodeRef linear_with(Graph& g, NodeRef x, const std::string& name, Array w, Array b) {
    Graph::Scope scope(g, name);
    auto wn = g.parameter("w", std::move(w));
    auto bn = g.parameter("b", std::move(b));
    return g.add(g.matmul(x, wn), bn);
}

NodeRef linear(Graph& g, NodeRef x, std::size_t out, const std::string& name, Rng& rng, double gain, double bias) {
    const std::size_t in = g.shape(x).back();
    return linear_with(g, x, name, normal_init({in, out}, in, rng, gain), Array({out}, bias));
}

NodeRef mlp2(Graph& g, NodeRef x, std::size_t hidden, std::size_t out, const std::string& name, Rng& rng,
             double out_gain, double out_bias) {
    Graph::Scope scope(g, name);
    auto h = g.relu(linear(g, x, hidden, "fc1", rng, std::sqrt(2.0)));
    return linear(g, h, out, "fc2", rng, out_gain, out_bias);
}

NodeRef tanh(Graph& g, NodeRef x) {
    return g.add(g.scale(g.sigmoid(g.scale(x, 2.0)), 2.0), g.constant(Array::scalar(-1.0)));
}

} // namespace sqs::model
