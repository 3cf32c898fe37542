#include "mseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mseg {

Head head_from_string(const std::string& s)
{
    if (s == "w" || s == "partial") return Head::partial;
    if (s == "s" || s == "full") return Head::full;
    throw std::invalid_argument("unknown head '" + s + "' (expected w or s)");
}

std::string to_string(Head h) { return h == Head::partial ? "partial" : "full"; }

namespace {

std::vector<std::int64_t> tile_starts(std::int64_t extent, std::int64_t patch, std::int64_t stride)
{
    std::vector<std::int64_t> starts;
    for (std::int64_t s = 0; s + patch <= extent; s += stride) {
        starts.push_back(s);
    }
    if (starts.back() + patch < extent) {
        starts.push_back(extent - patch);
    }
    return starts;
}

} // namespace

Tensor<float> tile_probabilities(const Model<float>& model, const Volume& volume, Head head,
                                 const TileOptions& options)
{
    volume.validate();
    if (head == Head::full && !model.has_full_head()) {
        throw std::invalid_argument("tile_infer: model has no full-task decoder (stage-1 checkpoint)");
    }
    const std::int64_t p = options.patch_size;
    const std::int64_t stride = options.stride > 0 ? options.stride : std::max<std::int64_t>(1, p / 2);
    for (auto d : volume.dims) {
        if (d < p) {
            throw std::invalid_argument("tile_infer: volume extent " + std::to_string(d) + " is smaller than patch "
                                        + std::to_string(p));
        }
    }
    const int classes = head == Head::full ? model.arch.num_full_classes : model.arch.num_partial_classes;
    const auto [D, H, W] = volume.dims;
    const std::int64_t n = D * H * W;
    Tensor<float> accum({classes, D, H, W});
    std::vector<float> hits(static_cast<std::size_t>(n), 0.f);

    const auto zs = tile_starts(D, p, stride);
    const auto ys = tile_starts(H, p, stride);
    const auto xs = tile_starts(W, p, stride);
    Tensor<float> tile({1, p, p, p});
    for (auto z0 : zs) {
        for (auto y0 : ys) {
            for (auto x0 : xs) {
                for (std::int64_t z = 0; z < p; ++z)
                    for (std::int64_t y = 0; y < p; ++y)
                        std::copy_n(volume.data.begin() + volume.index(z0 + z, y0 + y, x0), p,
                                    tile.ptr() + (z * p + y) * p);
                Tape<float> tape = Tape<float>::inference();
                auto out = forward(model, make_var(tile), tape);
                auto prob = softmax_channels(tape, head == Head::full ? out.logits_s : out.logits_w);
                const float* pr = prob->ptr();
                const std::int64_t tn = p * p * p;
                for (std::int64_t z = 0; z < p; ++z) {
                    for (std::int64_t y = 0; y < p; ++y) {
                        const std::int64_t dst = volume.index(z0 + z, y0 + y, x0);
                        const std::int64_t src = (z * p + y) * p;
                        for (int c = 0; c < classes; ++c) {
                            float* a = accum.ptr() + c * n + dst;
                            const float* b = pr + c * tn + src;
                            for (std::int64_t x = 0; x < p; ++x) {
                                a[x] += b[x];
                            }
                        }
                        for (std::int64_t x = 0; x < p; ++x) {
                            hits[static_cast<std::size_t>(dst + x)] += 1.f;
                        }
                    }
                }
            }
        }
    }
    for (int c = 0; c < classes; ++c) {
        float* a = accum.ptr() + c * n;
        for (std::int64_t v = 0; v < n; ++v) {
            a[v] /= hits[static_cast<std::size_t>(v)];
        }
    }
    return accum;
}

LabelVolume argmax_labels(const Tensor<float>& prob, const Dims& dims)
{
    const Index classes = prob.extent(0);
    const std::int64_t n = voxel_count(dims);
    if (prob.size() != classes * n) {
        throw std::invalid_argument("argmax_labels: probability map does not match dims");
    }
    LabelVolume out(dims, static_cast<int>(classes));
    for (std::int64_t v = 0; v < n; ++v) {
        Index best = 0;
        float best_p = prob[v];
        for (Index c = 1; c < classes; ++c) {
            if (prob[c * n + v] > best_p) {
                best = c;
                best_p = prob[c * n + v];
            }
        }
        out.data[static_cast<std::size_t>(v)] = static_cast<std::uint16_t>(best);
    }
    return out;
}

LabelVolume tile_infer(const Model<float>& model, const Volume& volume, Head head, const TileOptions& options)
{
    LabelVolume out = argmax_labels(tile_probabilities(model, volume, head, options), volume.dims);
    out.spacing = volume.spacing;
    return out;
}

double dice(const LabelVolume& pred, const LabelVolume& truth, std::uint16_t structure)
{
    if (pred.dims != truth.dims || pred.data.size() != truth.data.size()) {
        throw std::invalid_argument("dice: prediction and truth dims differ");
    }
    std::int64_t a = 0;
    std::int64_t b = 0;
    std::int64_t both = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool in_a = pred.data[i] == structure;
        const bool in_b = truth.data[i] == structure;
        a += in_a;
        b += in_b;
        both += in_a && in_b;
    }
    if (a + b == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<DiceEntry> evaluate_subject(const std::string& subject, const LabelVolume& pred, const LabelVolume& truth,
                                        int max_structure)
{
    std::vector<DiceEntry> out;
    for (int s = 1; s <= max_structure; ++s) {
        out.push_back({subject, s, dice(pred, truth, static_cast<std::uint16_t>(s))});
    }
    return out;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs)
{
    double mean = 0.0;
    for (double x : xs) {
        mean += x;
    }
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) {
        var += (x - mean) * (x - mean);
    }
    return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

} // namespace

DiceReport aggregate(const std::vector<DiceEntry>& entries, const std::string& task, SpreadAxis axis)
{
    if (entries.empty()) {
        throw std::invalid_argument("aggregate: no Dice values");
    }
    DiceReport r;
    r.task = task;
    r.entries = entries;
    r.axis = axis;

    // Subjects keep first-appearance order in the report; the statistics
    // themselves are order-independent.
    std::vector<std::string> order;
    std::map<std::string, std::pair<double, int>> by_subject;
    std::map<int, std::pair<double, int>> by_structure;
    for (const auto& e : entries) {
        if (e.structure == 0) {
            continue;
        }
        if (!(e.dice >= 0.0 && e.dice <= 1.0)) {
            throw std::invalid_argument("aggregate: Dice value outside [0, 1]");
        }
        auto [it, fresh] = by_subject.try_emplace(e.subject, 0.0, 0);
        if (fresh) {
            order.push_back(e.subject);
        }
        it->second.first += e.dice;
        it->second.second += 1;
        auto& s = by_structure[e.structure];
        s.first += e.dice;
        s.second += 1;
    }
    if (by_subject.empty()) {
        throw std::invalid_argument("aggregate: only background entries");
    }
    std::vector<double> means;
    for (const auto& name : order) {
        const auto& [total, count] = by_subject.at(name);
        r.subject_means.emplace_back(name, total / count);
    }
    if (axis == SpreadAxis::subjects) {
        for (const auto& [name, m] : r.subject_means) {
            means.push_back(m);
        }
    } else {
        for (const auto& [id, acc] : by_structure) {
            means.push_back(acc.first / acc.second);
        }
    }
    std::sort(means.begin(), means.end());
    std::tie(r.mean, r.std) = mean_std(means);
    r.n_subjects = order.size();
    return r;
}

std::string DiceReport::to_csv() const
{
    std::ostringstream os;
    os.precision(10);
    os << "subject,structure,dice\n";
    for (const auto& e : entries) {
        os << e.subject << ',' << e.structure << ',' << e.dice << '\n';
    }
    return os.str();
}

nlohmann::json DiceReport::summary() const
{
    return {{"task", task},
            {"mean", mean},
            {"std", std},
            {"n_subjects", n_subjects},
            {"spread", axis == SpreadAxis::subjects ? "subjects" : "structures"}};
}

} // namespace mseg
