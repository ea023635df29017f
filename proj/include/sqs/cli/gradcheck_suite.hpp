#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sqs::cli {

struct GradcheckEntry {
    std::string component;  // renderer, decoder, interaction
    std::string group;      // parameter or input name
    double max_relative_error = 0.0;
    std::size_t checked = 0;
};

inline constexpr double kGradcheckTolerance = 1e-4;

// Finite-difference suite over the renderer (five parameter classes), the
// encode-decode-render-loss path and the interaction block with the occupancy
// head. `fault` names a component whose analytic gradient is negated.
std::vector<GradcheckEntry> run_gradcheck_suite(std::uint64_t seed, const std::string& fault = "");

} // namespace sqs::cli
