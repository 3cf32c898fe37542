#include "oracles.hpp"

#include "mseg/eval.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace mseg;

namespace {

LabelVolume random_labels(Dims d, int classes, Rng& rng)
{
    LabelVolume l(d, classes);
    for (auto& v : l.data) v = static_cast<std::uint16_t>(rng() % static_cast<std::uint64_t>(classes));
    return l;
}

Volume random_image(Dims d, std::uint64_t seed)
{
    Rng rng(seed);
    Volume v(d);
    for (auto& x : v.data) x = static_cast<float>(uniform(rng, -2.0, 2.0));
    return v;
}

Model<float> small_monet(int partial = 3, int full = 5)
{
    ArchConfig a;
    a.depth = 1;
    a.base_channels = 2;
    a.num_partial_classes = partial;
    a.num_full_classes = full;
    auto m = build_monet<float>(a, 4);
    // Non-zero biases so heads are not near-uniform.
    Rng rng(8);
    for (const auto& p : m.params) {
        if (p.var->rank() != 1) continue;
        for (Index i = 0; i < p.var->size(); ++i) (*p.var)[i] = static_cast<float>(uniform(rng, -0.5, 0.5));
    }
    return m;
}

Volume crop(const Volume& v, std::int64_t z0, std::int64_t y0, std::int64_t x0, std::int64_t p)
{
    Volume out({p, p, p});
    for (std::int64_t z = 0; z < p; ++z)
        for (std::int64_t y = 0; y < p; ++y)
            for (std::int64_t x = 0; x < p; ++x) out.at(z, y, x) = v.at(z0 + z, y0 + y, x0 + x);
    return out;
}

LabelVolume single_forward(const Model<float>& m, const Volume& v, Head head)
{
    Tensor<float> t({1, v.dims[0], v.dims[1], v.dims[2]});
    std::copy(v.data.begin(), v.data.end(), t.ptr());
    Tape<float> tape = Tape<float>::inference();
    auto out = forward(m, make_var(t), tape);
    auto prob = softmax_channels(tape, head == Head::full ? out.logits_s : out.logits_w);
    return argmax_labels(*prob, v.dims);
}

} // namespace

TEST_CASE("dice closed forms")
{
    LabelVolume a({1, 1, 4}, 3);
    LabelVolume b({1, 1, 4}, 3);
    a.data = {1, 1, 0, 0};
    b.data = {0, 1, 1, 0};
    CHECK(dice(a, b, 1) == 0.5);
    CHECK(dice(a, a, 1) == 1.0);
    b.data = {0, 0, 1, 1};
    CHECK(dice(a, b, 1) == 0.0);
    CHECK(dice(a, b, 2) == 1.0);
    b.data = {2, 2, 0, 0};
    CHECK(dice(a, b, 2) == 0.0);
    LabelVolume c({1, 2, 2}, 3);
    CHECK_THROWS_AS(dice(a, c, 1), std::invalid_argument);
}

TEST_CASE("dice matches the voxel-count oracle on random volumes")
{
    Rng rng(31);
    for (int n = 0; n < 50; ++n) {
        const int classes = 2 + static_cast<int>(rng() % 5);
        const LabelVolume a = random_labels({8, 8, 8}, classes, rng);
        const LabelVolume b = random_labels({8, 8, 8}, classes, rng);
        for (int id = 0; id <= classes; ++id) {
            const auto s = static_cast<std::uint16_t>(id);
            CHECK(dice(a, b, s) == oracle::dice(a, b, s));
            CHECK(dice(a, b, s) == dice(b, a, s));
        }
    }
}

TEST_CASE("dice is invariant under a global relabeling")
{
    Rng rng(5);
    const LabelVolume a = random_labels({6, 6, 6}, 5, rng);
    const LabelVolume b = random_labels({6, 6, 6}, 5, rng);
    const std::vector<std::uint16_t> perm{3, 0, 4, 1, 2};
    LabelVolume pa = a;
    LabelVolume pb = b;
    for (auto& v : pa.data) v = perm[v];
    for (auto& v : pb.data) v = perm[v];
    for (std::uint16_t id = 0; id < 5; ++id) CHECK(dice(a, b, id) == dice(pa, pb, perm[id]));
}

TEST_CASE("aggregate closed forms")
{
    const auto one = aggregate({{"a", 1, 0.4}, {"a", 2, 0.6}}, "full");
    CHECK(one.mean == doctest::Approx(0.5));
    CHECK(one.std == 0.0);
    CHECK(one.n_subjects == 1);

    const auto two = aggregate({{"a", 1, 0.6}, {"b", 1, 0.8}}, "full");
    CHECK(std::abs(two.mean - 0.7) < 1e-12);
    CHECK(std::abs(two.std - 0.1) < 1e-12);

    // background rows are ignored
    const auto bg = aggregate({{"a", 0, 0.0}, {"a", 1, 0.9}}, "partial");
    CHECK(bg.mean == 0.9);

    CHECK_THROWS_AS(aggregate({}, "full"), std::invalid_argument);
    CHECK_THROWS_AS(aggregate({{"a", 0, 1.0}}, "full"), std::invalid_argument);
    CHECK_THROWS_AS(aggregate({{"a", 1, 1.5}}, "full"), std::invalid_argument);
}

TEST_CASE("aggregate matches a two-pass oracle and ignores subject order")
{
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const int subjects = 1 + static_cast<int>(rng() % 9);
        const int structures = 1 + static_cast<int>(rng() % 6);
        std::vector<DiceEntry> entries;
        std::vector<double> subject_means;
        for (int s = 0; s < subjects; ++s) {
            double total = 0.0;
            for (int k = 1; k <= structures; ++k) {
                const double d = uniform(rng, 0.0, 1.0);
                entries.push_back({"case_" + std::to_string(s), k, d});
                total += d;
            }
            subject_means.push_back(total / structures);
        }
        const auto [mean, sd] = oracle::mean_std(subject_means);
        const auto r = aggregate(entries, "full");
        CHECK(std::abs(r.mean - mean) < 1e-12);
        CHECK(std::abs(r.std - sd) < 1e-12);
        CHECK(r.n_subjects == static_cast<std::size_t>(subjects));

        std::vector<std::size_t> idx(static_cast<std::size_t>(subjects));
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        std::vector<DiceEntry> shuffled;
        for (auto s : idx)
            for (int k = 0; k < structures; ++k)
                shuffled.push_back(entries[s * static_cast<std::size_t>(structures) + static_cast<std::size_t>(k)]);
        const auto r2 = aggregate(shuffled, "full");
        CHECK(r2.mean == r.mean);
        CHECK(r2.std == r.std);
    }
}

TEST_CASE("aggregate across structures")
{
    const auto r = aggregate({{"a", 1, 0.2}, {"a", 2, 0.6}, {"b", 1, 0.4}, {"b", 2, 0.8}}, "full",
                             SpreadAxis::structures);
    CHECK(std::abs(r.mean - 0.5) < 1e-12);
    CHECK(std::abs(r.std - 0.2) < 1e-12);
    CHECK(r.summary()["spread"] == "structures");
}

TEST_CASE("report serialisation")
{
    const auto r = aggregate({{"a", 1, 0.5}, {"a", 2, 1.0}, {"b", 1, 0.25}, {"b", 2, 0.75}}, "partial");
    CHECK(r.to_csv() == "subject,structure,dice\na,1,0.5\na,2,1\nb,1,0.25\nb,2,0.75\n");
    const auto j = r.summary();
    CHECK(j["task"] == "partial");
    CHECK(j["n_subjects"] == 2);
    CHECK(j["mean"].get<double>() == doctest::Approx(0.625));
    CHECK(j.contains("std"));
    CHECK(evaluate_subject("x", LabelVolume({2, 2, 2}, 4), LabelVolume({2, 2, 2}, 4), 3).size() == 3);
}

TEST_CASE("head names")
{
    CHECK(head_from_string("w") == Head::partial);
    CHECK(head_from_string("s") == Head::full);
    CHECK(to_string(Head::full) == "full");
    CHECK_THROWS_AS(head_from_string("x"), std::invalid_argument);
}

TEST_CASE("single tile equals one forward pass")
{
    const auto m = small_monet();
    const Volume v = random_image({8, 8, 8}, 3);
    for (Head h : {Head::partial, Head::full}) {
        CHECK(tile_infer(m, v, h, {8, 0}).data == single_forward(m, v, h).data);
    }
}

TEST_CASE("tiled probabilities are normalised and ids stay in range")
{
    const auto m = small_monet();
    const Volume v = random_image({12, 10, 14}, 6);
    const Tensor<float> prob = tile_probabilities(m, v, Head::full, {4, 0});
    const std::int64_t n = voxel_count(v.dims);
    for (std::int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (Index c = 0; c < 5; ++c) s += prob[c * n + i];
        CHECK(std::abs(s - 1.0) < 1e-5);
    }
    const LabelVolume l = tile_infer(m, v, Head::full, {4, 0});
    CHECK(l.dims == v.dims);
    CHECK(*std::max_element(l.data.begin(), l.data.end()) < 5);
    const LabelVolume lw = tile_infer(m, v, Head::partial, {4, 3});
    CHECK(*std::max_element(lw.data.begin(), lw.data.end()) < 3);
}

TEST_CASE("non-overlapping tiles equal independent block argmax")
{
    const auto m = small_monet();
    const Volume v = random_image({8, 12, 4}, 9);
    const LabelVolume l = tile_infer(m, v, Head::full, {4, 4});
    for (std::int64_t z0 = 0; z0 < 8; z0 += 4)
        for (std::int64_t y0 = 0; y0 < 12; y0 += 4) {
            const LabelVolume block = single_forward(m, crop(v, z0, y0, 0, 4), Head::full);
            for (std::int64_t z = 0; z < 4; ++z)
                for (std::int64_t y = 0; y < 4; ++y)
                    for (std::int64_t x = 0; x < 4; ++x) CHECK(l.at(z0 + z, y0 + y, x) == block.at(z, y, x));
        }
}

TEST_CASE("tile inference errors")
{
    const auto m = small_monet();
    CHECK_THROWS_AS(tile_infer(m, random_image({4, 8, 8}, 1), Head::full, {8, 0}), std::invalid_argument);
    ArchConfig a = m.arch;
    const auto unet = build_unet<float>(a, 1);
    CHECK_THROWS_AS(tile_infer(unet, random_image({8, 8, 8}, 1), Head::full, {8, 0}), std::invalid_argument);
    CHECK(tile_infer(unet, random_image({8, 8, 8}, 1), Head::partial, {8, 0}).dims == Dims{8, 8, 8});
}

TEST_CASE("argmax ties go to the lowest class")
{
    Tensor<float> prob({3, 1, 1, 2});
    prob[0] = 0.25f;
    prob[2] = 0.5f;
    prob[4] = 0.25f; // voxel 0: class 1 wins
    prob[1] = 0.4f;
    prob[3] = 0.2f;
    prob[5] = 0.4f; // voxel 1: tie between 0 and 2
    const LabelVolume l = argmax_labels(prob, {1, 1, 2});
    CHECK(l.data == std::vector<std::uint16_t>{1, 0});
}
