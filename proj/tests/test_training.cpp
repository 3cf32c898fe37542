#include "oracles.hpp"

#include "mseg/training.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

using namespace mseg;
namespace fs = std::filesystem;

namespace {

ArchConfig tiny_arch(int partial = 3, int full = 4)
{
    ArchConfig a;
    a.depth = 2;
    a.base_channels = 4;
    a.num_partial_classes = partial;
    a.num_full_classes = full;
    return a;
}

TrainConfig tiny_config()
{
    TrainConfig c;
    c.patch_size = 16;
    c.arch = tiny_arch();
    c.seed = 5;
    return c;
}

Phantom tiny_phantom(std::uint64_t seed)
{
    PhantomSpec spec;
    spec.size = 16;
    spec.num_structures = 3;
    spec.partial_subset = 2;
    spec.anatomy_seed = 1;
    spec.seed = seed;
    return generate_phantom(spec);
}

FullSubject full_subject(std::uint64_t seed)
{
    Phantom p = tiny_phantom(seed);
    return {"s" + std::to_string(seed), zscore_normalize(p.image), p.labels, p.map};
}

PartialSubject partial_subject(std::uint64_t seed)
{
    Phantom p = tiny_phantom(seed);
    return {"s" + std::to_string(seed), zscore_normalize(p.image), extract_partial(p.labels, p.map)};
}

Var<double> random_logits(Index c, Index s, Rng& rng)
{
    return make_var(oracle::random_tensor<double>({c, s, s, s}, rng, -3.0, 3.0), true);
}

LabelVolume random_target(Index s, int classes, Rng& rng)
{
    LabelVolume l({s, s, s}, classes);
    for (auto& v : l.data) v = static_cast<std::uint16_t>(rng() % static_cast<std::uint64_t>(classes));
    return l;
}

double mean_loss(const TrainLog& log, std::size_t from, std::size_t count)
{
    double s = 0.0;
    for (std::size_t i = from; i < from + count; ++i) s += log.records[i].loss_total;
    return s / static_cast<double>(count);
}

bool same_params(const ParameterSet<float>& a, const ParameterSet<float>& b, const std::string& prefix)
{
    for (const auto& e : a) {
        if (e.name.rfind(prefix, 0) != 0) continue;
        const auto& o = b.at(e.name);
        if (std::memcmp(e.var->ptr(), o->ptr(), static_cast<std::size_t>(e.var->size()) * sizeof(float)) != 0) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("partial loss closed forms and oracle")
{
    Tape<double> tape;
    auto zeros = make_var(Tensor<double>({16, 2, 2, 2}), true);
    LabelVolume t({2, 2, 2}, 16);
    CHECK(std::abs(loss_partial(tape, zeros, t)->data()[0] - std::log(16.0)) < 1e-12);

    auto onehot = make_var(Tensor<double>({3, 1, 1, 2}), true);
    (*onehot)[0] = 60.0;
    (*onehot)[5] = 60.0;
    LabelVolume t2({1, 1, 2}, 3);
    t2.data = {0, 2};
    CHECK(loss_partial(tape, onehot, t2)->data()[0] < 1e-12);

    Rng rng(4);
    for (int n = 0; n < 5; ++n) {
        auto z = random_logits(4, 3, rng);
        const LabelVolume target = random_target(3, 4, rng);
        const auto p = oracle::softmax(*z);
        Tensor<double> prob(z->shape());
        for (Index i = 0; i < prob.size(); ++i) prob[i] = p[static_cast<std::size_t>(i)];
        CHECK(std::abs(loss_partial(tape, z, target)->data()[0] - oracle::cross_entropy(prob, target.data)) < 1e-6);
    }

    LabelVolume wrong({2, 2, 3}, 16);
    CHECK_THROWS_AS(loss_partial(tape, zeros, wrong), std::invalid_argument);
}

TEST_CASE("joint loss is the weighted sum of independently computed task losses")
{
    Rng rng(12);
    for (auto [ls, lw] : std::vector<std::pair<double, double>>{{0.5, 0.5}, {0.3, 1.7}, {0.0, 1.0}, {2.0, 0.0}}) {
        ForwardOutput<double> out{random_logits(3, 4, rng), random_logits(5, 4, rng)};
        const LabelVolume ts = random_target(4, 5, rng);
        const LabelVolume tw = random_target(4, 3, rng);
        Tape<double> tape;
        const double joint = loss_joint(tape, out, ts, tw, ls, lw).total->data()[0];
        Tape<double> a;
        Tape<double> b;
        const double full = loss_partial(a, out.logits_s, ts)->data()[0];
        const double part = loss_partial(b, out.logits_w, tw)->data()[0];
        CHECK(std::abs(joint - (ls * full + lw * part)) < 1e-12);
        if (lw == 0.0) CHECK(std::abs(joint - ls * full) < 1e-12);
        const double scaled = loss_joint(tape, out, ts, tw, 3.0 * ls, 3.0 * lw).total->data()[0];
        CHECK(std::abs(scaled - 3.0 * joint) < 1e-12);
    }
    Tape<double> tape;
    ForwardOutput<double> single{random_logits(3, 4, rng), nullptr};
    CHECK_THROWS_AS(loss_joint(tape, single, random_target(4, 5, rng), random_target(4, 3, rng), 0.5, 0.5),
                    std::invalid_argument);
}

TEST_CASE("zero task weight leaves that decoder without gradient")
{
    ArchConfig a = tiny_arch();
    a.depth = 1;
    a.base_channels = 2;
    for (auto [ls, lw, silent] :
         std::vector<std::tuple<double, double, std::string>>{{1.0, 0.0, "decoder_w."}, {0.0, 1.0, "decoder_s."}}) {
        auto m = build_monet<double>(a, 3);
        Rng rng(2);
        auto x = make_var(oracle::random_tensor<double>({1, 4, 4, 4}, rng));
        Tape<double> tape;
        auto out = forward(m, x, tape);
        auto l = loss_joint(tape, out, random_target(4, 4, rng), random_target(4, 3, rng), ls, lw);
        tape.backward(l.total);
        bool any_other = false;
        for (const auto& e : m.params) {
            const bool silent_group = e.name.rfind(silent, 0) == 0;
            const double norm = e.var->has_grad() ? e.var->grad().abs().maxCoeff() : 0.0;
            if (silent_group) CHECK(norm == 0.0);
            else any_other = any_other || norm > 0.0;
        }
        CHECK(any_other);
    }
}

TEST_CASE("lambda_w = 0 keeps decoder_w bit-unchanged over 10 steps")
{
    TrainConfig c = tiny_config();
    c.lambda_w = 0.0;
    c.joint_epochs = 10;
    c.steps_per_epoch = 1;
    const std::vector<FullSubject> data{full_subject(1)};
    const auto r0 = pretrain({partial_subject(9)}, [&] {
        TrainConfig p = c;
        p.pretrain_epochs = 2;
        return p;
    }());
    const auto before = build_monet<float>(c.arch, derive_seed(c.seed, "joint.init"));
    Model<float> expected = before;
    transfer_params(r0.checkpoint.model, expected);
    const auto r = joint_train(data, r0.checkpoint, c);
    CHECK(r.log.records.size() == 10);
    CHECK(same_params(r.checkpoint.model.params, expected.params, "decoder_w."));
    CHECK_FALSE(same_params(r.checkpoint.model.params, expected.params, "decoder_s."));
    CHECK_FALSE(same_params(r.checkpoint.model.params, expected.params, "encoder."));
}

TEST_CASE("zero epochs return the initial parameters")
{
    TrainConfig c = tiny_config();
    c.pretrain_epochs = 0;
    c.joint_epochs = 0;
    const auto p = pretrain({partial_subject(1)}, c);
    const auto fresh = build_unet<float>(c.arch, derive_seed(c.seed, "pretrain.init"));
    CHECK(p.log.records.empty());
    CHECK(same_params(p.checkpoint.model.params, fresh.params, ""));

    auto stage1 = build_unet<float>(c.arch, 77);
    const auto j = joint_train({full_subject(2)}, Checkpoint{stage1, std::nullopt}, c);
    auto expected = build_monet<float>(c.arch, derive_seed(c.seed, "joint.init"));
    const auto manifest = transfer_params(stage1, expected);
    CHECK(same_params(j.checkpoint.model.params, expected.params, ""));
    CHECK(j.transferred);
    CHECK(j.manifest.copied.size() == manifest.copied.size());
}

TEST_CASE("pretraining lowers the loss over 50 steps")
{
    TrainConfig c = tiny_config();
    c.pretrain_epochs = 50;
    c.steps_per_epoch = 1;
    const auto r = pretrain({partial_subject(4)}, c);
    REQUIRE(r.log.records.size() == 50);
    CHECK(r.log.records.back().loss_total < r.log.records.front().loss_total);
    CHECK(mean_loss(r.log, 45, 5) < mean_loss(r.log, 0, 5));
    for (std::size_t i = 0; i < 50; ++i) {
        CHECK(r.log.records[i].step == static_cast<std::int64_t>(i));
        CHECK(r.log.records[i].stage == "pretrain");
        CHECK(std::isnan(r.log.records[i].loss_s));
    }
}

TEST_CASE("joint training lowers the loss over 100 steps on two phantoms")
{
    TrainConfig c = tiny_config();
    c.joint_epochs = 50;
    const auto r = joint_train({full_subject(1), full_subject(2)}, std::nullopt, c);
    REQUIRE(r.log.records.size() == 100);
    CHECK(mean_loss(r.log, 90, 10) < mean_loss(r.log, 0, 10));
    CHECK(r.log.records.back().loss_total < r.log.records.front().loss_total);
    CHECK(r.log.records.front().stage == "joint_scratch");
    CHECK_FALSE(r.transferred);
    for (const auto& rec : r.log.records) {
        CHECK(std::abs(rec.loss_total - (0.5 * rec.loss_s + 0.5 * rec.loss_w)) < 1e-5);
    }
}

TEST_CASE("training is deterministic in the seed")
{
    TrainConfig c = tiny_config();
    c.pretrain_epochs = 4;
    c.joint_epochs = 3;
    const std::vector<PartialSubject> pdata{partial_subject(1), partial_subject(3)};
    const std::vector<FullSubject> fdata{full_subject(2)};
    const auto a = pretrain(pdata, c);
    const auto b = pretrain(pdata, c);
    CHECK(encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint));
    CHECK(a.log.to_csv() == b.log.to_csv());
    const auto ja = joint_train(fdata, a.checkpoint, c);
    const auto jb = joint_train(fdata, b.checkpoint, c);
    CHECK(encode_checkpoint(ja.checkpoint) == encode_checkpoint(jb.checkpoint));
    CHECK(ja.log.to_csv() == jb.log.to_csv());

    c.seed = 6;
    CHECK(encode_checkpoint(pretrain(pdata, c).checkpoint) != encode_checkpoint(a.checkpoint));
}

TEST_CASE("non-finite loss aborts training")
{
    TrainConfig c = tiny_config();
    c.pretrain_epochs = 1;
    c.augment = false;
    PartialSubject s = partial_subject(1);
    s.image.data[100] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(pretrain({s}, c), DivergenceError);
    c.joint_epochs = 1;
    FullSubject f = full_subject(1);
    f.image.data[7] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(joint_train({f}, std::nullopt, c), DivergenceError);
}

TEST_CASE("training input errors")
{
    TrainConfig c = tiny_config();
    CHECK_THROWS_AS(pretrain({}, c), std::invalid_argument);
    CHECK_THROWS_AS(joint_train({}, std::nullopt, c), std::invalid_argument);
    auto monet = build_monet<float>(c.arch, 1);
    CHECK_THROWS_AS(joint_train({full_subject(1)}, Checkpoint{monet, std::nullopt}, c), std::invalid_argument);
    TrainConfig narrow = c;
    narrow.arch.num_full_classes = 2;
    CHECK_THROWS_AS(joint_train({full_subject(1)}, std::nullopt, narrow), std::invalid_argument);
    TrainConfig odd = c;
    odd.patch_size = 10;
    CHECK_THROWS_AS(pretrain({partial_subject(1)}, odd), std::invalid_argument);
}

TEST_CASE("validation split and early stopping")
{
    TrainConfig c = tiny_config();
    c.pretrain_epochs = 6;
    c.validation_subjects = 1;
    c.early_stopping_patience = 1;
    c.lr = 0.5; // diverging steps stop improving quickly
    const auto r = pretrain({partial_subject(1), partial_subject(2)}, c);
    CHECK(!r.log.validation_losses.empty());
    CHECK(r.log.validation_losses.size() <= 6);
    CHECK(r.log.records.size() == r.log.validation_losses.size());
}

TEST_CASE("log CSV header and rows")
{
    TrainLog log;
    log.records.push_back({0, "pretrain", 1.5, 1.5, std::numeric_limits<double>::quiet_NaN(), 0.0});
    log.records.push_back({1, "joint", 0.75, 0.5, 1.0, 12.4});
    CHECK(log.to_csv() == "step,stage,loss_total,loss_w,loss_s,wall_ms\n0,pretrain,1.5,1.5,nan,0\n1,joint,0.75,0.5,1,12\n");
}

TEST_CASE("config JSON round-trip and unknown keys")
{
    TrainConfig c = tiny_config();
    c.lambda_s = 0.25;
    c.joint_epochs = 7;
    const auto j = to_json(c);
    const TrainConfig back = train_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(back.arch == c.arch);

    auto bad = j;
    bad["learning_rate"] = 0.1;
    CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("learning_rate"), std::invalid_argument);
    auto bad_arch = j;
    bad_arch["arch"]["width"] = 3;
    CHECK_THROWS_AS(train_config_from_json(bad_arch), std::invalid_argument);
    auto wrong_type = j;
    wrong_type["lr"] = "fast";
    CHECK_THROWS_AS(train_config_from_json(wrong_type), std::invalid_argument);
    auto negative = j;
    negative["lambda_w"] = -1.0;
    CHECK_THROWS_AS(train_config_from_json(negative), std::invalid_argument);
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json::array()), std::invalid_argument);
    CHECK(train_config_from_json(nlohmann::json::object()).lr == 1e-3);
}

TEST_CASE("checkpoint round-trip is byte-exact")
{
    const auto dir = fs::temp_directory_path() / "mseg_test_ckpt";
    fs::create_directories(dir);
    TrainConfig c = tiny_config();
    c.pretrain_epochs = 2;
    const auto r = pretrain({partial_subject(2)}, c);
    save_checkpoint(dir / "a.ckpt", r.checkpoint);
    const auto bytes = read_file_bytes(dir / "a.ckpt");
    CHECK(std::memcmp(bytes.data(), "MONETCKP", 8) == 0);
    const Checkpoint back = load_checkpoint(dir / "a.ckpt");
    save_checkpoint(dir / "b.ckpt", back);
    CHECK(read_file_bytes(dir / "b.ckpt") == bytes);
    CHECK(back.adam.has_value());
    CHECK(back.adam->step == 2);
    std::vector<std::string> names;
    for (const auto& e : back.model.params) names.push_back(e.name);
    std::vector<std::string> expected;
    for (const auto& e : r.checkpoint.model.params) expected.push_back(e.name);
    CHECK(names == expected);

    const Checkpoint plain{build_monet<float>(c.arch, 3), std::nullopt};
    CHECK(encode_checkpoint(decode_checkpoint(encode_checkpoint(plain))) == encode_checkpoint(plain));
}

TEST_CASE("corrupted and mismatched checkpoints are rejected")
{
    const Checkpoint ck{build_unet<float>(tiny_arch(), 3), std::nullopt};
    const auto bytes = encode_checkpoint(ck);
    auto flipped = bytes;
    flipped[0] ^= 0x01;
    CHECK_THROWS_AS(decode_checkpoint(flipped), FormatError);
    auto version = bytes;
    version[8] = 9;
    CHECK_THROWS_AS(decode_checkpoint(version), FormatError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);

    // rename the first tensor to something outside the grammar
    auto renamed = bytes;
    const std::string first = ck.model.params.begin()->name;
    auto at = std::search(renamed.begin(), renamed.end(), first.begin(), first.end());
    REQUIRE(at != renamed.end());
    *at = 'X';
    CHECK_THROWS_WITH_AS(decode_checkpoint(renamed), doctest::Contains("grammar"), FormatError);

    const auto dir = fs::temp_directory_path() / "mseg_test_ckpt_bad";
    fs::create_directories(dir);
    save_checkpoint(dir / "u.ckpt", ck);
    ArchConfig wider = tiny_arch();
    wider.base_channels = 6;
    CHECK_THROWS_WITH(load_checkpoint(dir / "u.ckpt", wider, ModelKind::unet), doctest::Contains("encoder.level0.conv0.weight"));
    CHECK_THROWS(load_checkpoint(dir / "u.ckpt", tiny_arch(), ModelKind::monet));
    CHECK(load_checkpoint(dir / "u.ckpt", tiny_arch(), ModelKind::unet).model.params.size() == ck.model.params.size());
    CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
}
