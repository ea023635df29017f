#pragma once

#include "sqs/autodiff/graph.hpp"

#include <random>
#include <string>

namespace sqs::model {

using ad::Array;
using ad::Graph;
using ad::NodeRef;
using ad::Shape;
using Rng = std::mt19937_64;

// Zero-mean normal weights with standard deviation gain / sqrt(fan_in).
Array normal_init(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0);

// x [..., in] -> [..., out] with parameters <scope>.<name>.w [in, out] and
// <scope>.<name>.b [out].
NodeRef linear(Graph& g, NodeRef x, std::size_t out, const std::string& name, Rng& rng, double gain = 1.0,
               double bias = 0.0);

// Same, with explicit initial weight and bias arrays.
NodeRef linear_with(Graph& g, NodeRef x, const std::string& name, Array w, Array b);

// linear -> relu -> linear. The last layer uses `out_gain` and `out_bias`.
NodeRef mlp2(Graph& g, NodeRef x, std::size_t hidden, std::size_t out, const std::string& name, Rng& rng,
             double out_gain = 1.0, double out_bias = 0.0);

// tanh composed from sigmoid: 2 sigmoid(2x) - 1.
NodeRef tanh(Graph& g, NodeRef x);

} // namespace sqs::model
