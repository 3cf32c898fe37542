#pragma once

#include "mseg/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mseg {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// First/second moment buffers keyed by parameter name, plus the shared
/// step counter. Empty until the first step.
template <typename Scalar>
struct AdamState {
    struct Moments {
        std::string name;
        typename Tensor<Scalar>::Buffer m;
        typename Tensor<Scalar>::Buffer v;
    };

    AdamOptions options;
    std::int64_t step = 0;
    std::vector<Moments> moments;
};

/// One bias-corrected Adam update over every parameter. Throws if a
/// parameter carries no gradient or the state belongs to another set.
template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state);

} // namespace mseg
