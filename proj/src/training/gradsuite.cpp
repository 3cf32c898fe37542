#include "mseg/gradsuite.hpp"

#include "mseg/models.hpp"
#include "mseg/training.hpp"

#include <cmath>

namespace mseg {

namespace {

// Uniform entries in [lo, hi) kept at least `gap` away from zero so that
// LeakyReLU kinks sit outside the probe step.
Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, double gap = 0.0)
{
    Tensor<double> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
        double x = uniform(rng, lo, hi);
        while (gap > 0.0 && std::abs(x) < gap) {
            x = uniform(rng, lo, hi);
        }
        t[i] = x;
    }
    return t;
}

std::vector<std::uint16_t> random_labels(Index n, int classes, Rng& rng)
{
    std::vector<std::uint16_t> out(static_cast<std::size_t>(n));
    for (auto& l : out) {
        l = static_cast<std::uint16_t>(rng() % static_cast<std::uint64_t>(classes));
    }
    return out;
}

LabelVolume random_label_volume(std::int64_t size, int classes, Rng& rng)
{
    LabelVolume v(Dims{size, size, size}, classes);
    v.data = random_labels(voxel_count(v.dims), classes, rng);
    return v;
}

} // namespace

std::vector<GradCheckReport> run_gradient_suite(const GradSuiteOptions& o)
{
    std::vector<GradCheckReport> reports;
    Rng rng = make_rng(o.seed, "gradsuite");
    const GradCheckOptions& opt = o.check;

    {
        auto x = make_var(random_tensor({2, 4, 4, 4}, rng));
        auto w = make_var(random_tensor({3, 2, 3, 3, 3}, rng));
        auto b = make_var(random_tensor({3}, rng));
        const auto proj = random_tensor({3, 4, 4, 4}, rng);
        reports.push_back(finite_diff_check(
            to_string(OpFamily::conv3d), [&](Tape<double>& t) { return dot(t, conv3d(t, x, w, b), proj); },
            {x, w, b}, opt));
    }
    {
        auto x = make_var(random_tensor({2, 3, 3, 3}, rng, -1.0, 1.0, 1e-2));
        const auto proj = random_tensor({2, 3, 3, 3}, rng);
        reports.push_back(finite_diff_check(
            to_string(OpFamily::leaky_relu), [&](Tape<double>& t) { return dot(t, leaky_relu(t, x, 0.01), proj); },
            {x}, opt));
    }
    {
        // Distinct values spaced well beyond the probe step.
        Tensor<double> v({2, 4, 4, 4});
        std::vector<double> levels(static_cast<std::size_t>(v.size()));
        for (std::size_t i = 0; i < levels.size(); ++i) {
            levels[i] = 0.01 * static_cast<double>(i);
        }
        std::shuffle(levels.begin(), levels.end(), rng);
        for (Index i = 0; i < v.size(); ++i) {
            v[i] = levels[static_cast<std::size_t>(i)];
        }
        auto x = make_var(std::move(v));
        const auto proj = random_tensor({2, 2, 2, 2}, rng);
        reports.push_back(finite_diff_check(
            to_string(OpFamily::max_pool3d), [&](Tape<double>& t) { return dot(t, max_pool3d(t, x), proj); }, {x},
            opt));
    }
    {
        auto x = make_var(random_tensor({2, 2, 2, 2}, rng));
        const auto proj = random_tensor({2, 4, 4, 4}, rng);
        reports.push_back(finite_diff_check(
            to_string(OpFamily::upsample_nearest),
            [&](Tape<double>& t) { return dot(t, upsample_nearest(t, x), proj); }, {x}, opt));
    }
    {
        auto a = make_var(random_tensor({1, 2, 2, 2}, rng));
        auto b = make_var(random_tensor({2, 2, 2, 2}, rng));
        const auto proj = random_tensor({3, 2, 2, 2}, rng);
        reports.push_back(finite_diff_check(
            to_string(OpFamily::concat_channels),
            [&](Tape<double>& t) { return dot(t, concat_channels(t, a, b), proj); }, {a, b}, opt));
    }
    {
        auto z = make_var(random_tensor({4, 2, 2, 2}, rng, -3.0, 3.0));
        const auto proj = random_tensor({4, 2, 2, 2}, rng);
        reports.push_back(finite_diff_check(
            to_string(OpFamily::softmax_channels),
            [&](Tape<double>& t) { return dot(t, softmax_channels(t, z), proj); }, {z}, opt));
    }
    {
        auto p = make_var(random_tensor({3, 2, 2, 2}, rng, 0.1, 1.0));
        const auto labels = random_labels(8, 3, rng);
        reports.push_back(finite_diff_check(
            to_string(OpFamily::cross_entropy), [&](Tape<double>& t) { return cross_entropy(t, p, labels); }, {p},
            opt));
    }
    {
        auto a = make_var(random_tensor({2, 2, 2, 2}, rng));
        auto b = make_var(random_tensor({2, 2, 2, 2}, rng));
        const auto proj = random_tensor({2, 2, 2, 2}, rng);
        reports.push_back(finite_diff_check(
            to_string(OpFamily::elementwise),
            [&](Tape<double>& t) { return add(t, dot(t, add(t, a, scale(t, b, 0.7)), proj), sum(t, a)); }, {a, b},
            opt));
    }
    {
        ArchConfig arch;
        arch.depth = o.depth;
        arch.base_channels = o.base_channels;
        arch.num_partial_classes = 3;
        arch.num_full_classes = 4;
        Model<double> net = build_monet<double>(arch, derive_seed(o.seed, "gradsuite.net"));
        // Non-zero biases so every path carries signal.
        for (const auto& e : net.params) {
            if (e.var->rank() == 1) {
                for (Index i = 0; i < e.var->size(); ++i) {
                    (*e.var)[i] = uniform(rng, -0.1, 0.1);
                }
            }
        }
        const std::int64_t s = o.patch_size;
        auto patch = make_var(random_tensor({1, s, s, s}, rng));
        const LabelVolume target_s = random_label_volume(s, arch.num_full_classes, rng);
        const LabelVolume target_w = random_label_volume(s, arch.num_partial_classes, rng);
        std::vector<Var<double>> inputs;
        for (const auto& e : net.params) {
            inputs.push_back(e.var);
        }
        GradCheckOptions net_opt = opt;
        net_opt.samples_per_tensor = o.network_samples;
        net_opt.seed = derive_seed(o.seed, "gradsuite.probes");
        reports.push_back(finite_diff_check(
            "monet_joint_loss",
            [&](Tape<double>& t) {
                auto out = forward(net, patch, t);
                return loss_joint(t, out, target_s, target_w, 0.5, 0.5).total;
            },
            inputs, net_opt));
    }
    return reports;
}

} // namespace mseg
