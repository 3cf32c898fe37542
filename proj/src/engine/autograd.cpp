#include "mseg/autograd.hpp"

#include "op_support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

namespace mseg {

std::string shape_string(const Shape& shape)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ')';
    return os.str();
}

std::string to_string(OpFamily family)
{
    switch (family) {
    case OpFamily::conv3d: return "conv3d";
    case OpFamily::leaky_relu: return "leaky_relu";
    case OpFamily::max_pool3d: return "max_pool3d";
    case OpFamily::upsample_nearest: return "upsample_nearest";
    case OpFamily::concat_channels: return "concat_channels";
    case OpFamily::softmax_channels: return "softmax_channels";
    case OpFamily::cross_entropy: return "cross_entropy";
    case OpFamily::elementwise: return "elementwise";
    }
    return "unknown";
}

std::vector<OpFamily> all_op_families()
{
    return {OpFamily::conv3d,           OpFamily::leaky_relu,       OpFamily::max_pool3d,
            OpFamily::upsample_nearest, OpFamily::concat_channels,  OpFamily::softmax_channels,
            OpFamily::cross_entropy,    OpFamily::elementwise};
}

std::optional<OpFamily> op_family_from_string(const std::string& name)
{
    for (OpFamily f : all_op_families()) {
        if (to_string(f) == name) {
            return f;
        }
    }
    return std::nullopt;
}

namespace debug {
namespace {
std::atomic<bool> g_validation{false};
std::atomic<int> g_fault{-1};
thread_local bool t_trace = false;
thread_local std::uint64_t t_digest = 0;
} // namespace

void set_pattern_trace(bool enabled) { t_trace = enabled; }
bool pattern_trace_enabled() { return t_trace; }
void reset_pattern_digest() { t_digest = 0xcbf29ce484222325ULL; }
std::uint64_t pattern_digest() { return t_digest; }
void fold_pattern(std::uint64_t value) { t_digest = (t_digest ^ value) * 0x100000001b3ULL; }

void set_validation(bool enabled) { g_validation = enabled; }
bool validation_enabled() { return g_validation; }

void inject_fault(std::optional<OpFamily> family) { g_fault = family ? static_cast<int>(*family) : -1; }

std::optional<OpFamily> injected_fault()
{
    const int f = g_fault;
    if (f < 0) {
        return std::nullopt;
    }
    return static_cast<OpFamily>(f);
}

} // namespace debug


template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& loss)
{
    if (!loss || loss->size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    }
    const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                     [&](const Entry& e) { return e.output == loss; });
    if (!on_tape) {
        throw std::invalid_argument("backward: loss was not produced under this tape");
    }
    loss->ensure_grad()[0] += Scalar(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output->has_grad()) {
            it->rule();
        }
    }
}

namespace {

template <typename Scalar>
void accumulate(const Var<Scalar>& target, const typename Tensor<Scalar>::Buffer& g)
{
    if (target->requires_grad()) {
        target->ensure_grad() += g;
    }
}

} // namespace

template <typename Scalar>
Var<Scalar> leaky_relu(Tape<Scalar>& tape, const Var<Scalar>& input, Scalar slope)
{
    const auto& x = input->data();
    auto out = make_var(Tensor<Scalar>(input->shape(), (x > Scalar(0)).select(x, slope * x)));
    detail::validate_output(out, OpFamily::leaky_relu);
    if (debug::pattern_trace_enabled()) {
        for (Index i = 0; i < x.size(); ++i) {
            debug::fold_pattern(x[i] > Scalar(0) ? 1 : 0);
        }
    }
    if (detail::needs_grad(tape, {&input})) {
        out->set_requires_grad(true);
        tape.record(out, [input, out, slope] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::leaky_relu);
            const auto& xv = input->data();
            typename Tensor<Scalar>::Buffer g
                = (xv > Scalar(0)).select(out->grad(), slope * out->grad()) * k;
            accumulate(input, g);
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> max_pool3d(Tape<Scalar>& tape, const Var<Scalar>& input)
{
    detail::require_rank(input, 4, "max_pool3d");
    const Index c = input->extent(0), d = input->extent(1), h = input->extent(2), w = input->extent(3);
    if (d % 2 || h % 2 || w % 2) {
        throw std::invalid_argument("max_pool3d: odd spatial extent in " + shape_string(input->shape()));
    }
    const Index od = d / 2, oh = h / 2, ow = w / 2;
    auto out = make_var(Tensor<Scalar>({c, od, oh, ow}));
    std::vector<Index> argmax(static_cast<std::size_t>(out->size()));
    const Scalar* src = input->ptr();
    Scalar* dst = out->ptr();
    Index o = 0;
    for (Index ch = 0; ch < c; ++ch) {
        for (Index z = 0; z < od; ++z) {
            for (Index y = 0; y < oh; ++y) {
                for (Index x = 0; x < ow; ++x, ++o) {
                    Index best = -1;
                    Scalar best_v = -std::numeric_limits<Scalar>::infinity();
                    for (Index dz = 0; dz < 2; ++dz) {
                        for (Index dy = 0; dy < 2; ++dy) {
                            for (Index dx = 0; dx < 2; ++dx) {
                                const Index i = ((ch * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx;
                                if (best < 0 || src[i] > best_v) {
                                    best = i;
                                    best_v = src[i];
                                }
                            }
                        }
                    }
                    dst[o] = best_v;
                    argmax[static_cast<std::size_t>(o)] = best;
                }
            }
        }
    }
    detail::validate_output(out, OpFamily::max_pool3d);
    if (debug::pattern_trace_enabled()) {
        for (Index i : argmax) {
            debug::fold_pattern(static_cast<std::uint64_t>(i));
        }
    }
    if (detail::needs_grad(tape, {&input})) {
        out->set_requires_grad(true);
        tape.record(out, [input, out, argmax = std::move(argmax)] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::max_pool3d);
            auto& g = input->ensure_grad();
            const auto& go = out->grad();
            for (std::size_t i = 0; i < argmax.size(); ++i) {
                g[argmax[i]] += k * go[static_cast<Index>(i)];
            }
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> upsample_nearest(Tape<Scalar>& tape, const Var<Scalar>& input)
{
    detail::require_rank(input, 4, "upsample_nearest");
    const Index c = input->extent(0), d = input->extent(1), h = input->extent(2), w = input->extent(3);
    auto out = make_var(Tensor<Scalar>({c, 2 * d, 2 * h, 2 * w}));
    const Scalar* src = input->ptr();
    Scalar* dst = out->ptr();
    for (Index ch = 0; ch < c; ++ch) {
        for (Index z = 0; z < 2 * d; ++z) {
            for (Index y = 0; y < 2 * h; ++y) {
                const Scalar* row = src + ((ch * d + z / 2) * h + y / 2) * w;
                Scalar* orow = dst + ((ch * 2 * d + z) * 2 * h + y) * 2 * w;
                for (Index x = 0; x < 2 * w; ++x) {
                    orow[x] = row[x / 2];
                }
            }
        }
    }
    detail::validate_output(out, OpFamily::upsample_nearest);
    if (detail::needs_grad(tape, {&input})) {
        out->set_requires_grad(true);
        tape.record(out, [input, out, c, d, h, w] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::upsample_nearest);
            auto& g = input->ensure_grad();
            const Scalar* go = out->grad().data();
            for (Index ch = 0; ch < c; ++ch) {
                for (Index z = 0; z < 2 * d; ++z) {
                    for (Index y = 0; y < 2 * h; ++y) {
                        const Scalar* orow = go + ((ch * 2 * d + z) * 2 * h + y) * 2 * w;
                        const Index base = ((ch * d + z / 2) * h + y / 2) * w;
                        for (Index x = 0; x < 2 * w; ++x) {
                            g[base + x / 2] += k * orow[x];
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> concat_channels(Tape<Scalar>& tape, const Var<Scalar>& a, const Var<Scalar>& b)
{
    detail::require_rank(a, 4, "concat_channels");
    detail::require_rank(b, 4, "concat_channels");
    for (Index axis = 1; axis < 4; ++axis) {
        if (a->extent(axis) != b->extent(axis)) {
            throw std::invalid_argument("concat_channels: spatial mismatch " + shape_string(a->shape()) + " vs "
                                        + shape_string(b->shape()));
        }
    }
    const Index na = a->size(), nb = b->size();
    typename Tensor<Scalar>::Buffer data(na + nb);
    data.head(na) = a->data();
    data.tail(nb) = b->data();
    auto out = make_var(Tensor<Scalar>({a->extent(0) + b->extent(0), a->extent(1), a->extent(2), a->extent(3)},
                                       std::move(data)));
    if (detail::needs_grad(tape, {&a, &b})) {
        out->set_requires_grad(true);
        tape.record(out, [a, b, out, na, nb] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::concat_channels);
            if (a->requires_grad()) {
                a->ensure_grad() += k * out->grad().head(na);
            }
            if (b->requires_grad()) {
                b->ensure_grad() += out->grad().tail(nb);
            }
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> softmax_channels(Tape<Scalar>& tape, const Var<Scalar>& logits)
{
    detail::require_rank(logits, 4, "softmax_channels");
    const Index c = logits->extent(0);
    if (c < 1) {
        throw std::invalid_argument("softmax_channels: need at least one channel");
    }
    const Index n = logits->size() / c;
    using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> z(logits->ptr(), c, n);
    auto out = make_var(Tensor<Scalar>(logits->shape()));
    Eigen::Map<RowMat> p(out->ptr(), c, n);
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> zmax = z.colwise().maxCoeff();
    p = (z.rowwise() - zmax).array().exp().matrix();
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> denom = p.colwise().sum();
    p.array().rowwise() /= denom.array();
    detail::validate_output(out, OpFamily::softmax_channels);
    if (detail::needs_grad(tape, {&logits})) {
        out->set_requires_grad(true);
        tape.record(out, [logits, out, c, n] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::softmax_channels);
            Eigen::Map<const RowMat> pv(out->ptr(), c, n);
            Eigen::Map<const RowMat> gp(out->grad().data(), c, n);
            const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dot = (pv.array() * gp.array()).colwise().sum();
            RowMat gz = (pv.array() * (gp.rowwise() - dot).array()).matrix();
            auto& g = logits->ensure_grad();
            Eigen::Map<RowMat>(g.data(), c, n) += k * gz;
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> cross_entropy(Tape<Scalar>& tape, const Var<Scalar>& prob, std::span<const std::uint16_t> target)
{
    detail::require_rank(prob, 4, "cross_entropy");
    const Index c = prob->extent(0);
    const Index n = c > 0 ? prob->size() / c : 0;
    if (static_cast<Index>(target.size()) != n || n == 0) {
        throw std::invalid_argument("cross_entropy: target has " + std::to_string(target.size())
                                    + " voxels, probabilities have " + std::to_string(n));
    }
    const Scalar* p = prob->ptr();
    const Scalar clamp = static_cast<Scalar>(kLogClamp);
    // Neumaier-compensated sum.
    double total = 0.0;
    double carry = 0.0;
    for (Index v = 0; v < n; ++v) {
        const Index label = target[static_cast<std::size_t>(v)];
        if (label >= c) {
            throw std::invalid_argument("cross_entropy: label " + std::to_string(label) + " out of range for "
                                        + std::to_string(c) + " classes");
        }
        const double term = -std::log(static_cast<double>(std::max(p[label * n + v], clamp)));
        const double next = total + term;
        carry += std::abs(total) >= std::abs(term) ? (total - next) + term : (term - next) + total;
        total = next;
    }
    auto out = make_var(Tensor<Scalar>::full({1}, static_cast<Scalar>((total + carry) / static_cast<double>(n))));
    detail::validate_output(out, OpFamily::cross_entropy);
    if (detail::needs_grad(tape, {&prob})) {
        out->set_requires_grad(true);
        std::vector<std::uint16_t> labels(target.begin(), target.end());
        tape.record(out, [prob, out, n, clamp, labels = std::move(labels)] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::cross_entropy);
            const Scalar scale_v = -out->grad()[0] * k / static_cast<Scalar>(n);
            auto& g = prob->ensure_grad();
            const Scalar* pv = prob->ptr();
            for (Index v = 0; v < n; ++v) {
                const Index i = static_cast<Index>(labels[static_cast<std::size_t>(v)]) * n + v;
                if (pv[i] > clamp) {
                    g[i] += scale_v / pv[i];
                }
            }
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> sum(Tape<Scalar>& tape, const Var<Scalar>& input)
{
    auto out = make_var(Tensor<Scalar>::full({1}, input->data().sum()));
    if (detail::needs_grad(tape, {&input})) {
        out->set_requires_grad(true);
        tape.record(out, [input, out] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::elementwise);
            input->ensure_grad() += k * out->grad()[0];
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> add(Tape<Scalar>& tape, const Var<Scalar>& a, const Var<Scalar>& b)
{
    if (a->shape() != b->shape()) {
        throw std::invalid_argument("add: shape mismatch " + shape_string(a->shape()) + " vs "
                                    + shape_string(b->shape()));
    }
    auto out = make_var(Tensor<Scalar>(a->shape(), a->data() + b->data()));
    detail::validate_output(out, OpFamily::elementwise);
    if (detail::needs_grad(tape, {&a, &b})) {
        out->set_requires_grad(true);
        tape.record(out, [a, b, out] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::elementwise);
            accumulate(a, typename Tensor<Scalar>::Buffer(k * out->grad()));
            accumulate(b, out->grad());
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> dot(Tape<Scalar>& tape, const Var<Scalar>& input, const Tensor<Scalar>& weights)
{
    if (input->size() != weights.size()) {
        throw std::invalid_argument("dot: size mismatch " + shape_string(input->shape()) + " vs "
                                    + shape_string(weights.shape()));
    }
    auto out = make_var(Tensor<Scalar>::full({1}, (input->data() * weights.data()).sum()));
    if (detail::needs_grad(tape, {&input})) {
        out->set_requires_grad(true);
        tape.record(out, [input, out, w = weights.data()] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::elementwise);
            input->ensure_grad() += (k * out->grad()[0]) * w;
        });
    }
    return out;
}

template <typename Scalar>
Var<Scalar> scale(Tape<Scalar>& tape, const Var<Scalar>& input, Scalar factor)
{
    auto out = make_var(Tensor<Scalar>(input->shape(), input->data() * factor));
    detail::validate_output(out, OpFamily::elementwise);
    if (detail::needs_grad(tape, {&input})) {
        out->set_requires_grad(true);
        tape.record(out, [input, out, factor] {
            const Scalar k = detail::fault_factor<Scalar>(OpFamily::elementwise);
            input->ensure_grad() += (k * factor) * out->grad();
        });
    }
    return out;
}

#define MSEG_INSTANTIATE(S)                                                                        \
    template class Tape<S>;                                                                        \
    template Var<S> leaky_relu(Tape<S>&, const Var<S>&, S);                                        \
    template Var<S> max_pool3d(Tape<S>&, const Var<S>&);                                           \
    template Var<S> upsample_nearest(Tape<S>&, const Var<S>&);                                     \
    template Var<S> concat_channels(Tape<S>&, const Var<S>&, const Var<S>&);                       \
    template Var<S> softmax_channels(Tape<S>&, const Var<S>&);                                     \
    template Var<S> cross_entropy(Tape<S>&, const Var<S>&, std::span<const std::uint16_t>);        \
    template Var<S> sum(Tape<S>&, const Var<S>&);                                                  \
    template Var<S> add(Tape<S>&, const Var<S>&, const Var<S>&);                                   \
    template Var<S> dot(Tape<S>&, const Var<S>&, const Tensor<S>&);                                \
    template Var<S> scale(Tape<S>&, const Var<S>&, S);

MSEG_INSTANTIATE(float)
MSEG_INSTANTIATE(double)

#undef MSEG_INSTANTIATE

} // namespace mseg
