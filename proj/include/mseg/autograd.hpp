#pragma once

#include "mseg/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mseg {

/// Differentiable operator families, used for coverage reporting and fault
/// injection in the gradient harness.
enum class OpFamily {
    conv3d,
    leaky_relu,
    max_pool3d,
    upsample_nearest,
    concat_channels,
    softmax_channels,
    cross_entropy,
    elementwise,
};

std::string to_string(OpFamily family);
std::optional<OpFamily> op_family_from_string(const std::string& name);
std::vector<OpFamily> all_op_families();

namespace debug {

/// When enabled every op output is scanned and a non-finite value throws.
void set_validation(bool enabled);
bool validation_enabled();

/// Corrupts the backward rule of one family (scales its input gradient by
/// 1.5). Only meant for negative controls of the gradient harness.
void inject_fault(std::optional<OpFamily> family);
std::optional<OpFamily> injected_fault();

/// While tracing, LeakyReLU signs and max-pool winners are folded into a
/// per-thread digest. Two evaluations with equal digests ran through the
/// same piecewise-linear region.
void set_pattern_trace(bool enabled);
bool pattern_trace_enabled();
void reset_pattern_digest();
std::uint64_t pattern_digest();
void fold_pattern(std::uint64_t value);

} // namespace debug

/// Ordered record of executed operations and their backward rules.
///
/// An op is recorded only while the tape is recording and at least one of
/// its inputs requires a gradient. backward() replays rules in reverse
/// recording order, so each recorded op runs exactly once.
template <typename Scalar>
class Tape {
public:
    explicit Tape(bool recording = true)
        : recording_(recording)
    {
    }

    static Tape inference() { return Tape(false); }

    bool recording() const { return recording_; }
    std::size_t size() const { return entries_.size(); }

    void record(const Var<Scalar>& output, std::function<void()> rule)
    {
        entries_.push_back({output, std::move(rule)});
    }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable
    /// requires_grad tensor. Gradients accumulate into existing slots.
    void backward(const Var<Scalar>& loss);

    void clear() { entries_.clear(); }

private:
    struct Entry {
        Var<Scalar> output;
        std::function<void()> rule;
    };

    bool recording_;
    std::vector<Entry> entries_;
};

/// Zero-padded "same" cross-correlation. input [C_in,D,H,W], weight
/// [C_out,C_in,k,k,k] with odd k, bias [C_out].
template <typename Scalar>
Var<Scalar> conv3d(Tape<Scalar>& tape, const Var<Scalar>& input, const Var<Scalar>& weight,
                   const Var<Scalar>& bias);

template <typename Scalar>
Var<Scalar> leaky_relu(Tape<Scalar>& tape, const Var<Scalar>& input, Scalar slope = Scalar(0.01));

/// Disjoint 2x2x2 max. Ties go to the first maximum in D, H, W scan order.
template <typename Scalar>
Var<Scalar> max_pool3d(Tape<Scalar>& tape, const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> upsample_nearest(Tape<Scalar>& tape, const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> concat_channels(Tape<Scalar>& tape, const Var<Scalar>& a, const Var<Scalar>& b);

template <typename Scalar>
Var<Scalar> softmax_channels(Tape<Scalar>& tape, const Var<Scalar>& logits);

/// Voxel-mean of -log(max(prob[target(v)], 1e-12)). target holds one class
/// id per voxel in the same D,H,W order as prob.
template <typename Scalar>
Var<Scalar> cross_entropy(Tape<Scalar>& tape, const Var<Scalar>& prob, std::span<const std::uint16_t> target);

template <typename Scalar>
Var<Scalar> sum(Tape<Scalar>& tape, const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> add(Tape<Scalar>& tape, const Var<Scalar>& a, const Var<Scalar>& b);

/// sum_i x_i * weights_i against a constant tensor; a cheap way to give an
/// op a non-uniform upstream gradient in checks.
template <typename Scalar>
Var<Scalar> dot(Tape<Scalar>& tape, const Var<Scalar>& input, const Tensor<Scalar>& weights);

template <typename Scalar>
Var<Scalar> scale(Tape<Scalar>& tape, const Var<Scalar>& input, Scalar factor);

inline constexpr double kLogClamp = 1e-12;

} // namespace mseg
