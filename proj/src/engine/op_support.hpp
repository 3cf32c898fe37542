#pragma once

#include "mseg/autograd.hpp"

#include <algorithm>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace mseg {

namespace detail {

template <typename Scalar>
inline Scalar fault_factor(OpFamily family)
{
    const auto f = debug::injected_fault();
    return (f && *f == family) ? Scalar(1.5) : Scalar(1);
}

template <typename Scalar>
inline void validate_output(const Var<Scalar>& out, OpFamily family)
{
    if (!debug::validation_enabled()) {
        return;
    }
    if (!out->data().isFinite().all()) {
        throw std::domain_error("non-finite value produced by " + to_string(family));
    }
}

template <typename Scalar>
inline bool needs_grad(const Tape<Scalar>& tape, std::initializer_list<const Var<Scalar>*> inputs)
{
    if (!tape.recording()) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(), [](const Var<Scalar>* v) { return (*v)->requires_grad(); });
}

template <typename Scalar>
inline void require_rank(const Var<Scalar>& v, Index rank, const char* op)
{
    if (!v) {
        throw std::invalid_argument(std::string(op) + ": null input");
    }
    if (v->rank() != rank) {
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape "
                                    + shape_string(v->shape()));
    }
}

} // namespace detail

} // namespace mseg
