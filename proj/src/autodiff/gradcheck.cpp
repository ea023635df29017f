#include "sqs/autodiff/gradcheck.hpp"

#include "sqs/core/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sqs::ad {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

GradCheckResult finite_difference_check(const std::function<double(const Array&)>& f,
                                        const std::function<Array(const Array&)>& analytic_gradient,
                                        const Array& point, double epsilon,
                                        const std::optional<std::vector<std::size_t>>& indices) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
        throw InvalidArgument("finite-difference epsilon must lie in [1e-7, 1e-3]");
    }
    const double f0 = f(point);
    const double f1 = f(point);
    if (std::memcmp(&f0, &f1, sizeof(double)) != 0) {
        throw InvalidArgument("function is non-deterministic: two evaluations at the same point differ");
    }
    const Array analytic = analytic_gradient(point);
    if (analytic.shape() != point.shape()) throw ShapeError("analytic gradient shape differs from the point's");

    std::vector<std::size_t> probe;
    if (indices) probe = *indices;
    else {
        probe.resize(point.size());
        for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
    }

    GradCheckResult result;
    Array x = point;
    for (auto i : probe) {
        if (i >= point.size()) throw InvalidArgument("probe index out of range");
        const double orig = x[i];
        x[i] = orig + epsilon;
        const double fp = f(x);
        x[i] = orig - epsilon;
        const double fm = f(x);
        x[i] = orig;
        const double numeric = (fp - fm) / (2.0 * epsilon);
        const double err = relative_error(analytic[i], numeric);
        if (result.checked == 0 || err > result.max_relative_error) {
            result.max_relative_error = err;
            result.worst_index = i;
            result.analytic = analytic[i];
            result.numeric = numeric;
        }
        ++result.checked;
    }
    return result;
}

GradCheckResult check_graph_gradient(Graph& graph, NodeRef root, const std::string& name,
                                     const std::map<std::string, Array>& inputs, const Array& seed, double epsilon,
                                     const std::optional<std::vector<std::size_t>>& indices, double analytic_scale) {
    const bool is_param = graph.has_parameter(name);
    std::map<std::string, Array> feed = inputs;
    const Array original = is_param ? graph.parameter_value(name) : feed.at(name);

    auto set_point = [&](const Array& x) {
        if (is_param) graph.mutable_parameter(name) = x;
        else feed[name] = x;
    };
    auto f = [&](const Array& x) {
        set_point(x);
        graph.evaluate(feed);
        const Array& out = graph.value(root);
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += seed[i] * out[i];
        return s;
    };
    auto grad = [&](const Array& x) {
        set_point(x);
        graph.evaluate(feed);
        graph.backpropagate(root, seed);
        Array g = is_param ? graph.parameter_gradient(name) : graph.gradient(graph.find(name));
        if (analytic_scale != 1.0)
            for (double& v : g.values()) v *= analytic_scale;
        return g;
    };
    GradCheckResult r = finite_difference_check(f, grad, original, epsilon, indices);
    set_point(original);
    return r;
}

std::vector<std::size_t> smooth_probe_indices(Graph& graph, NodeRef root, const std::string& name,
                                              const std::map<std::string, Array>& inputs, const Array& seed,
                                              double epsilon, std::size_t count, std::size_t candidates,
                                              double consistency) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw InvalidArgument("smooth_probe_indices: epsilon out of range");
    const bool is_param = graph.has_parameter(name);
    std::map<std::string, Array> feed = inputs;
    const Array original = is_param ? graph.parameter_value(name) : feed.at(name);
    Array x = original;
    auto f = [&]() {
        if (is_param) graph.mutable_parameter(name) = x;
        else feed[name] = x;
        graph.evaluate(feed);
        const Array& out = graph.value(root);
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += seed[i] * out[i];
        return s;
    };
    const double f0 = f();
    // Central difference and the one-sided disagreement (second difference).
    auto diffs = [&](std::size_t i, double h) {
        x[i] = original[i] + h;
        const double fp = f();
        x[i] = original[i] - h;
        const double fm = f();
        x[i] = original[i];
        return std::pair{(fp - fm) / (2.0 * h), (fp - 2.0 * f0 + fm) / h};
    };
    std::vector<std::size_t> out;
    for (std::size_t i : probe_indices(original.size(), candidates)) {
        if (out.size() == count) break;
        const auto [a, ka] = diffs(i, epsilon);
        const auto [b, kb] = diffs(i, 0.5 * epsilon);
        const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
        // Smooth curvature makes the second difference scale with h; a kink at
        // the point makes it constant. Central differences alone agree there.
        if (std::abs(a - b) <= consistency * scale && std::abs(ka - 2.0 * kb) <= consistency * scale)
            out.push_back(i);
    }
    f();  // leaves the graph evaluated at the original point
    return out;
}

std::vector<std::size_t> probe_indices(std::size_t size, std::size_t count) {
    std::vector<std::size_t> out;
    if (count >= size) {
        for (std::size_t i = 0; i < size; ++i) out.push_back(i);
        return out;
    }
    for (std::size_t k = 0; k < count; ++k) out.push_back((k * size) / count + (k * 7919) % std::max<std::size_t>(1, size / count));
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

} // namespace sqs::ad
