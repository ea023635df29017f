#pragma once

#include "sqs/autodiff/array.hpp"
#include "sqs/autodiff/graph.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace sqs::ad {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

// Relative error |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

// Compares analytic_gradient(point) against central differences of f.
// Only coordinates in `indices` are probed when given. f is evaluated twice at
// the unperturbed point; a bitwise disagreement is rejected as
// non-determinism. epsilon must lie in [1e-7, 1e-3].
GradCheckResult finite_difference_check(const std::function<double(const Array&)>& f,
                                        const std::function<Array(const Array&)>& analytic_gradient,
                                        const Array& point, double epsilon,
                                        const std::optional<std::vector<std::size_t>>& indices = std::nullopt);

// Checks d(sum(seed * root)) / d(parameter or differentiable input `name`).
// The graph is re-evaluated with `inputs` for every probe; the named node is
// restored afterwards. analytic_scale multiplies the backpropagated gradient
// before comparison; only fault-injection tests set it.
GradCheckResult check_graph_gradient(Graph& graph, NodeRef root, const std::string& name,
                                     const std::map<std::string, Array>& inputs, const Array& seed, double epsilon,
                                     const std::optional<std::vector<std::size_t>>& indices = std::nullopt,
                                     double analytic_scale = 1.0);

// Up to `count` of `candidates` evenly spread coordinates of `name` where the
// central differences at epsilon and epsilon/2 agree and the second
// differences scale linearly with the step, both to `consistency` (relative). Coordinates next to a
// kink or lost in rounding fail this and are skipped; the analytic gradient
// plays no part in the choice.
std::vector<std::size_t> smooth_probe_indices(Graph& graph, NodeRef root, const std::string& name,
                                              const std::map<std::string, Array>& inputs, const Array& seed,
                                              double epsilon, std::size_t count, std::size_t candidates = 32,
                                              double consistency = 1e-5);

// Evenly spread sample of `count` coordinates out of `size` (all when
// count >= size).
std::vector<std::size_t> probe_indices(std::size_t size, std::size_t count);

} // namespace sqs::ad
