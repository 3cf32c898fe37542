#include "mseg/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace mseg {

template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state)
{
    if (state.moments.empty()) {
        for (const auto& e : params) {
            using Buffer = typename Tensor<Scalar>::Buffer;
            state.moments.push_back({e.name, Buffer::Zero(e.var->size()), Buffer::Zero(e.var->size())});
        }
    }
    if (state.moments.size() != params.size()) {
        throw std::invalid_argument("adam_step: optimizer state tracks " + std::to_string(state.moments.size())
                                    + " parameters, model has " + std::to_string(params.size()));
    }
    std::size_t i = 0;
    for (const auto& e : params) {
        const auto& mom = state.moments[i++];
        if (mom.name != e.name || mom.m.size() != e.var->size()) {
            throw std::invalid_argument("adam_step: optimizer state does not match parameter '" + e.name + "'");
        }
        if (!e.var->has_grad()) {
            throw std::invalid_argument("adam_step: parameter '" + e.name + "' has no gradient");
        }
    }

    const auto& o = state.options;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const auto c1 = static_cast<Scalar>(1.0 - std::pow(o.beta1, t));
    const auto c2 = static_cast<Scalar>(1.0 - std::pow(o.beta2, t));
    const auto b1 = static_cast<Scalar>(o.beta1);
    const auto b2 = static_cast<Scalar>(o.beta2);
    const auto lr = static_cast<Scalar>(o.lr);
    const auto eps = static_cast<Scalar>(o.epsilon);

    i = 0;
    for (const auto& e : params) {
        auto& mom = state.moments[i++];
        const auto& g = e.var->grad();
        mom.m = b1 * mom.m + (Scalar(1) - b1) * g;
        mom.v = b2 * mom.v + (Scalar(1) - b2) * g.square();
        e.var->data() -= lr * (mom.m / c1) / ((mom.v / c2).sqrt() + eps);
    }
}

template void adam_step(ParameterSet<float>&, AdamState<float>&);
template void adam_step(ParameterSet<double>&, AdamState<double>&);

} // namespace mseg
