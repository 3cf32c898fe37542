#pragma once

#include "mseg/autograd.hpp"
#include "mseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace mseg {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Entries probed per input tensor; 0 probes every entry.
    Index samples_per_tensor = 0;
    /// Denominator floor, so entries whose true gradient is ~0 are judged on
    /// absolute error instead of blowing up the ratio.
    double scale_floor = 1e-6;
    std::uint64_t seed = 0;
    /// Sampled entries whose +-step probe crosses a LeakyReLU or max-pool
    /// switch are redrawn, since the function is not differentiable inside
    /// that interval. Applies only when sampling; small tensors that are
    /// probed exhaustively just drop such entries.
    bool skip_kinks = true;
    /// Redraw budget per tensor.
    Index max_redraws = 1000;
};

struct GradCheckReport {
    std::string label;
    double max_rel_error = 0.0;
    std::string worst_entry;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    Index entries_checked = 0;
    /// Probes discarded because they straddled a kink.
    Index kinks_skipped = 0;
    bool passed = false;
};

/// Compares analytic gradients of a scalar loss against central finite
/// differences. build_loss(Tape<double>&) must rebuild the loss from the
/// current contents of `inputs` each time it is called.
template <typename LossFn>
GradCheckReport finite_diff_check(std::string label, LossFn&& build_loss, const std::vector<Var<double>>& inputs,
                                  const GradCheckOptions& options = {})
{
    for (const auto& v : inputs) {
        v->clear_grad();
        v->set_requires_grad(true);
    }
    {
        Tape<double> tape;
        Var<double> loss = build_loss(tape);
        tape.backward(loss);
    }

    const bool sampling = options.samples_per_tensor > 0;
    const bool trace = sampling && options.skip_kinks;
    auto eval = [&](std::uint64_t* digest) {
        debug::set_pattern_trace(trace);
        debug::reset_pattern_digest();
        Tape<double> tape = Tape<double>::inference();
        const double value = build_loss(tape)->data()[0];
        debug::set_pattern_trace(false);
        if (digest) {
            *digest = debug::pattern_digest();
        }
        return value;
    };
    std::uint64_t base_digest = 0;
    if (trace) {
        eval(&base_digest);
    }

    GradCheckReport report;
    report.label = std::move(label);
    Rng rng(derive_seed(options.seed, "gradcheck"));
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const auto& v = inputs[t];
        const Index n = v->size();
        const bool all = !sampling || options.samples_per_tensor >= n;
        const Index wanted = all ? n : options.samples_per_tensor;
        Index done = 0;
        Index redraws = 0;
        for (Index k = 0; done < wanted; ++k) {
            const Index i = all ? k : static_cast<Index>(rng() % static_cast<std::uint64_t>(n));
            if (all && i >= n) {
                break;
            }
            const double analytic = v->has_grad() ? v->grad()[i] : 0.0;
            const double saved = v->data()[i];
            std::uint64_t d_up = base_digest;
            std::uint64_t d_down = base_digest;
            v->data()[i] = saved + options.step;
            const double up = eval(&d_up);
            v->data()[i] = saved - options.step;
            const double down = eval(&d_down);
            v->data()[i] = saved;
            if (trace && (d_up != base_digest || d_down != base_digest) && redraws < options.max_redraws) {
                ++redraws;
                ++report.kinks_skipped;
                continue;
            }
            const double numeric = (up - down) / (2.0 * options.step);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), options.scale_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            if (rel > report.max_rel_error || report.entries_checked == 0) {
                report.max_rel_error = std::max(report.max_rel_error, rel);
                report.worst_entry = "input " + std::to_string(t) + " entry " + std::to_string(i);
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
            ++report.entries_checked;
            ++done;
        }
    }
    report.passed = report.max_rel_error < options.tolerance;
    return report;
}

} // namespace mseg
