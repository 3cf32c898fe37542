#pragma once

#include "mseg/gradcheck.hpp"

#include <cstdint>
#include <vector>

namespace mseg {

struct GradSuiteOptions {
    std::int64_t patch_size = 8;
    int depth = 2;
    int base_channels = 2;
    std::uint64_t seed = 0;
    /// Entries probed per parameter tensor of the full network.
    Index network_samples = 16;
    GradCheckOptions check;
};

/// Finite-difference checks for every op family, then the dual-decoder
/// network with the joint loss, all in double precision.
std::vector<GradCheckReport> run_gradient_suite(const GradSuiteOptions& options = {});

} // namespace mseg
