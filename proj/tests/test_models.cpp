#include "oracles.hpp"

#include "mseg/gradcheck.hpp"
#include "mseg/models.hpp"
#include "mseg/training.hpp"

#include <doctest.h>

#include <algorithm>
#include <set>

using namespace mseg;

namespace {

ArchConfig small(int depth = 1, int base = 2, int cw = 2, int cs = 3)
{
    ArchConfig a;
    a.depth = depth;
    a.base_channels = base;
    a.num_partial_classes = cw;
    a.num_full_classes = cs;
    return a;
}

// Closed-form tally: a k^3 conv from a to c channels has k^3*a*c + c
// parameters; the head is a 1x1x1 conv.
Index conv_count(Index a, Index c, Index k = 3) { return k * k * k * a * c + c; }

Index encoder_count(const ArchConfig& a)
{
    Index n = 0, cin = a.in_channels;
    for (int l = 0; l < a.depth; ++l) {
        const Index c = Index(a.base_channels) << l;
        n += conv_count(cin, c) + conv_count(c, c);
        cin = c;
    }
    const Index cb = Index(a.base_channels) << a.depth;
    return n + conv_count(cin, cb) + conv_count(cb, cb);
}

Index decoder_count(const ArchConfig& a, Index classes)
{
    Index n = 0;
    for (int l = 0; l < a.depth; ++l) {
        const Index c = Index(a.base_channels) << l;
        n += conv_count(2 * c, c) + conv_count(2 * c, c) + conv_count(c, c);
    }
    return n + conv_count(a.base_channels, classes, 1);
}

Var<float> random_patch(Rng& rng, Index c, Index d, Index h, Index w)
{
    return make_var(cast<float>(oracle::random_tensor<double>({c, d, h, w}, rng)));
}

} // namespace

TEST_CASE("parameter count of the smallest U-Net")
{
    // encoder 56 + 110 + 220 + 436, decoder up 218 + conv0 218 + conv1 110, head 6
    const auto m = build_unet<float>(small(1, 2, 2), 1);
    CHECK(m.params.total_elements() == 1374);
    for (int depth : {1, 2, 3}) {
        for (int base : {2, 4}) {
            const ArchConfig a = small(depth, base, 4, 7);
            CHECK(build_unet<float>(a, 0).params.total_elements() == encoder_count(a) + decoder_count(a, 4));
            CHECK(build_monet<float>(a, 0).params.total_elements()
                  == build_unet<float>(a, 0).params.total_elements() + decoder_count(a, 7));
        }
    }
}

TEST_CASE("build is a pure function of config and seed")
{
    const ArchConfig a = small(2, 2, 3, 5);
    const auto x = build_monet<float>(a, 42);
    const auto y = build_monet<float>(a, 42);
    const auto z = build_monet<float>(a, 43);
    bool any_diff = false;
    auto xi = x.params.begin();
    auto zi = z.params.begin();
    for (auto yi = y.params.begin(); yi != y.params.end(); ++xi, ++yi, ++zi) {
        CHECK(xi->name == yi->name);
        CHECK(bit_equal(*xi->var, *yi->var));
        any_diff = any_diff || !bit_equal(*xi->var, *zi->var);
    }
    CHECK(any_diff);
}

TEST_CASE("initialisation: zero biases, He-scaled weights")
{
    const ArchConfig a = small(2, 8, 3, 5);
    const auto m = build_unet<double>(a, 5);
    for (const auto& spec : parameter_layout(a, ModelKind::unet)) {
        const auto& t = *m.params.at(spec.name);
        if (spec.shape.size() == 1) {
            CHECK(t.data().abs().maxCoeff() == 0.0);
            continue;
        }
        if (t.size() < 1000) continue;
        const double var = t.data().square().mean();
        const double expected = 2.0 / ((1.0 + 0.01 * 0.01) * static_cast<double>(spec.fan_in));
        CHECK(var == doctest::Approx(expected).epsilon(0.15));
    }
}

TEST_CASE("parameter names follow the grammar")
{
    for (const auto& n : build_monet<float>(small(3, 2), 0).params.names()) CHECK(is_valid_param_name(n));
    for (const auto& n : build_unet<float>(small(3, 2), 0).params.names()) CHECK(is_valid_param_name(n));
    CHECK(is_valid_param_name("encoder.level12.conv0.weight"));
    CHECK(is_valid_param_name("decoder_s.head.bias"));
    CHECK_FALSE(is_valid_param_name("encoder.head.weight"));
    CHECK_FALSE(is_valid_param_name("encoder.level0.up.weight"));
    CHECK_FALSE(is_valid_param_name("decoder_x.level0.conv0.weight"));
    CHECK_FALSE(is_valid_param_name("decoder.level0.conv0.gamma"));
    CHECK_FALSE(is_valid_param_name("decoder.bottleneck.conv0.weight"));
    CHECK_FALSE(is_valid_param_name(" encoder.level0.conv0.weight"));
}

TEST_CASE("dual-decoder naming contract")
{
    const ArchConfig a = small(2, 2, 3, 5);
    const auto u = build_unet<float>(a, 0).params.names();
    const auto m = build_monet<float>(a, 0).params.names();
    std::set<std::string> expected;
    for (const auto& n : u) {
        if (n.rfind("decoder.", 0) == 0) {
            expected.insert("decoder_w." + n.substr(8));
            expected.insert("decoder_s." + n.substr(8));
        } else {
            expected.insert(n);
        }
    }
    CHECK(std::set<std::string>(m.begin(), m.end()) == expected);
    CHECK(m.size() == expected.size());
}

TEST_CASE("forward shapes")
{
    Rng rng(3);
    SUBCASE("default depth 3 at 32^3 gives 16 partial channels")
    {
        ArchConfig a;
        CHECK(a.num_partial_classes == 16);
        const auto m = build_unet<float>(a, 0);
        Tape<float> tape = Tape<float>::inference();
        auto out = forward(m, random_patch(rng, 1, 32, 32, 32), tape);
        CHECK(out.logits_w->shape() == Shape{16, 32, 32, 32});
        CHECK(out.logits_s == nullptr);
    }
    SUBCASE("both heads at input resolution, including non-cubic patches")
    {
        for (int depth : {1, 2, 3}) {
            const ArchConfig a = small(depth, 2, 3, 5);
            const Index m = a.patch_multiple();
            const auto net = build_monet<float>(a, 1);
            Tape<float> tape = Tape<float>::inference();
            auto out = forward(net, random_patch(rng, 1, m, 2 * m, 3 * m), tape);
            CHECK(out.logits_w->shape() == Shape{3, m, 2 * m, 3 * m});
            CHECK(out.logits_s->shape() == Shape{5, m, 2 * m, 3 * m});
        }
    }
    SUBCASE("errors")
    {
        const auto net = build_unet<float>(small(2, 2), 0);
        Tape<float> tape;
        CHECK_THROWS_AS(forward(net, random_patch(rng, 1, 8, 8, 6), tape), std::invalid_argument);
        CHECK_THROWS_AS(forward(net, random_patch(rng, 2, 8, 8, 8), tape), std::invalid_argument);
        ArchConfig bad = small();
        bad.depth = 0;
        CHECK_THROWS_AS(build_unet<float>(bad, 0), std::invalid_argument);
        bad = small(1, 2, 1);
        CHECK_THROWS_AS(build_monet<float>(bad, 0), std::invalid_argument);
        bad = small();
        bad.num_full_classes = 1;
        CHECK_THROWS_AS(build_monet<float>(bad, 0), std::invalid_argument);
    }
}

TEST_CASE("zero input with zeroed heads gives uniform softmax")
{
    auto net = build_monet<float>(small(2, 2, 3, 5), 9);
    for (const auto& e : net.params) {
        if (e.name.find(".head.") != std::string::npos) e.var->data().setZero();
    }
    Tape<float> tape = Tape<float>::inference();
    auto out = forward(net, make_var(Tensor<float>({1, 8, 8, 8})), tape);
    auto pw = softmax_channels(tape, out.logits_w);
    auto ps = softmax_channels(tape, out.logits_s);
    for (Index i = 0; i < pw->size(); ++i) CHECK((*pw)[i] == doctest::Approx(1.0 / 3.0));
    for (Index i = 0; i < ps->size(); ++i) CHECK((*ps)[i] == doctest::Approx(1.0 / 5.0));
}

TEST_CASE("decoder_s perturbation leaves logits_w bit-unchanged")
{
    Rng rng(4);
    auto net = build_monet<float>(small(2, 2, 3, 5), 9);
    auto patch = random_patch(rng, 1, 8, 8, 8);
    Tape<float> t1 = Tape<float>::inference();
    const auto before = forward(net, patch, t1);
    for (const auto& e : net.params) {
        if (e.name.rfind("decoder_s.", 0) == 0) e.var->data() += 0.25f;
    }
    Tape<float> t2 = Tape<float>::inference();
    const auto after = forward(net, patch, t2);
    CHECK(bit_equal(*before.logits_w, *after.logits_w));
    CHECK_FALSE(bit_equal(*before.logits_s, *after.logits_s));
}

TEST_CASE("full-network finite-difference check on an 8^3 patch")
{
    Rng rng(6);
    ArchConfig a = small(2, 2, 3, 4);
    Model<double> net = build_monet<double>(a, 2);
    for (const auto& e : net.params) {
        if (e.var->rank() == 1) {
            for (Index i = 0; i < e.var->size(); ++i) (*e.var)[i] = mseg::uniform(rng, -0.1, 0.1);
        }
    }
    auto patch = make_var(oracle::random_tensor<double>({1, 8, 8, 8}, rng));
    LabelVolume ts(Dims{8, 8, 8}, 4), tw(Dims{8, 8, 8}, 3);
    for (auto& l : ts.data) l = static_cast<std::uint16_t>(rng() % 4);
    for (auto& l : tw.data) l = static_cast<std::uint16_t>(rng() % 3);
    std::vector<Var<double>> inputs;
    for (const auto& e : net.params) inputs.push_back(e.var);
    GradCheckOptions o;
    o.samples_per_tensor = 16;
    auto r = finite_diff_check(
        "net", [&](Tape<double>& t) { return loss_joint(t, forward(net, patch, t), ts, tw, 0.5, 0.5).total; }, inputs,
        o);
    CHECK(r.max_rel_error < 1e-4);
    Index expected = 0;
    for (const auto& v : inputs) expected += std::min<Index>(16, v->size());
    CHECK(r.entries_checked <= expected);
    CHECK(r.entries_checked + r.kinks_skipped >= expected);
}

TEST_CASE("encoder gradient of the joint loss is the weighted sum of task gradients")
{
    Rng rng(8);
    const ArchConfig a = small(2, 2, 3, 4);
    Model<double> net = build_monet<double>(a, 3);
    auto patch = make_var(oracle::random_tensor<double>({1, 8, 8, 8}, rng));
    LabelVolume ts(Dims{8, 8, 8}, 4), tw(Dims{8, 8, 8}, 3);
    for (auto& l : ts.data) l = static_cast<std::uint16_t>(rng() % 4);
    for (auto& l : tw.data) l = static_cast<std::uint16_t>(rng() % 3);

    auto grads = [&](double ls, double lw) {
        net.params.zero_grad();
        Tape<double> t;
        auto l = loss_joint(t, forward(net, patch, t), ts, tw, ls, lw);
        t.backward(l.total);
        std::vector<Tensor<double>::Buffer> g;
        for (const auto& e : net.params) {
            if (e.name.rfind("encoder.", 0) == 0) g.push_back(e.var->grad());
        }
        return g;
    };
    const double ls = 0.3, lw = 0.8;
    const auto joint = grads(ls, lw);
    const auto full = grads(1.0, 0.0);
    const auto part = grads(0.0, 1.0);
    double worst = 0;
    for (std::size_t i = 0; i < joint.size(); ++i) {
        worst = std::max(worst, (joint[i] - (ls * full[i] + lw * part[i])).abs().maxCoeff());
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("transfer_params")
{
    Rng rng(10);
    SUBCASE("C_s != C_w skips exactly the full-task classifier")
    {
        const ArchConfig a = small(2, 2, 3, 5);
        const auto s1 = build_unet<float>(a, 1);
        auto mo = build_monet<float>(a, 2);
        const auto fresh = mo;
        const auto man = transfer_params(s1, mo);
        CHECK(man.skipped == std::vector<std::string>{"decoder_s.head.weight", "decoder_s.head.bias"});
        CHECK(bit_equal(*mo.params.at("decoder_s.head.weight"), *fresh.params.at("decoder_s.head.weight")));
        for (const auto& e : s1.params) {
            if (e.name.rfind("encoder.", 0) == 0) {
                CHECK(bit_equal(*e.var, *mo.params.at(e.name)));
            } else {
                const std::string tail = e.name.substr(8);
                CHECK(bit_equal(*e.var, *mo.params.at("decoder_w." + tail)));
                if (tail.rfind("head.", 0) != 0) CHECK(bit_equal(*e.var, *mo.params.at("decoder_s." + tail)));
            }
        }
        const std::size_t enc = 12, dec = s1.params.size() - enc;
        CHECK(man.copied.size() == enc + 2 * dec - 2);
    }
    SUBCASE("C_s == C_w skips nothing")
    {
        const ArchConfig a = small(2, 2, 4, 4);
        const auto s1 = build_unet<float>(a, 1);
        auto mo = build_monet<float>(a, 2);
        const auto man = transfer_params(s1, mo);
        CHECK(man.skipped.empty());
        CHECK(bit_equal(*mo.params.at("decoder_s.head.weight"), *s1.params.at("decoder.head.weight")));
    }
    SUBCASE("logits_w reproduce stage 1 bit-exactly")
    {
        const ArchConfig a = small(2, 4, 3, 6);
        const auto s1 = build_unet<float>(a, 1);
        auto mo = build_monet<float>(a, 2);
        transfer_params(s1, mo);
        for (int i = 0; i < 3; ++i) {
            auto p = random_patch(rng, 1, 8, 8, 8);
            Tape<float> t = Tape<float>::inference();
            CHECK(bit_equal(*forward(s1, p, t).logits_w, *forward(mo, p, t).logits_w));
        }
    }
    SUBCASE("errors")
    {
        const auto s1 = build_unet<float>(small(2, 2, 3, 5), 1);
        auto wide = build_monet<float>(small(2, 4, 3, 5), 2);
        CHECK_THROWS_AS(transfer_params(s1, wide), std::invalid_argument);
        auto deep = build_monet<float>(small(3, 2, 3, 5), 2);
        CHECK_THROWS_AS(transfer_params(s1, deep), std::invalid_argument);
        auto other_w = build_monet<float>(small(2, 2, 4, 5), 2);
        CHECK_THROWS_AS(transfer_params(s1, other_w), std::invalid_argument);
        auto mo = build_monet<float>(small(2, 2, 3, 5), 2);
        CHECK_THROWS_AS(transfer_params(mo, mo), std::invalid_argument);
    }
}

TEST_CASE("check_layout names the first offending tensor")
{
    const ArchConfig a = small(2, 2, 3, 5);
    const auto m = build_unet<float>(a, 0);
    CHECK_NOTHROW(check_layout(a, ModelKind::unet, m.params));
    try {
        check_layout(small(2, 4, 3, 5), ModelKind::unet, m.params);
        FAIL("expected a layout error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("encoder.level0.conv0.weight") != std::string::npos);
    }
    try {
        check_layout(small(2, 2, 4, 5), ModelKind::unet, m.params);
        FAIL("expected a layout error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("decoder.head.weight") != std::string::npos);
    }
    CHECK_THROWS_AS(check_layout(a, ModelKind::monet, m.params), std::invalid_argument);
}
