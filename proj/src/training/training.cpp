#include "mseg/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace mseg {

// ---------------------------------------------------------------- config --

void TrainConfig::validate() const
{
    arch.validate();
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid training config: " + what); };
    if (patch_size <= 0 || patch_size % arch.patch_multiple() != 0) {
        fail("patch_size must be a positive multiple of " + std::to_string(arch.patch_multiple()));
    }
    if (!(lr > 0.0)) fail("lr must be positive");
    if (!(lambda_s >= 0.0) || !(lambda_w >= 0.0)) fail("loss weights must be >= 0");
    if (pretrain_epochs < 0 || joint_epochs < 0) fail("epochs must be >= 0");
    if (steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
    if (!(augment_magnitude >= 0.0)) fail("augment_magnitude must be >= 0");
    if (lr_decay_every < 0 || !(lr_decay_gamma > 0.0)) fail("invalid lr decay");
    if (validation_subjects < 0 || early_stopping_patience < 0) fail("invalid validation settings");
}

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where)
{
    if (!j.is_object()) {
        throw std::invalid_argument(where + ": expected a JSON object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
        }
    }
}

template <typename T>
void read_key(const json& j, const char* key, T& out)
{
    if (j.contains(key)) {
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception& e) {
            throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
        }
    }
}

ArchConfig arch_from_json(const json& j)
{
    reject_unknown(j,
                   {"base_channels", "depth", "kernel_size", "in_channels", "num_partial_classes",
                    "num_full_classes"},
                   "arch");
    ArchConfig a;
    read_key(j, "base_channels", a.base_channels);
    read_key(j, "depth", a.depth);
    read_key(j, "kernel_size", a.kernel_size);
    read_key(j, "in_channels", a.in_channels);
    read_key(j, "num_partial_classes", a.num_partial_classes);
    read_key(j, "num_full_classes", a.num_full_classes);
    return a;
}

} // namespace

TrainConfig train_config_from_json(const json& j)
{
    reject_unknown(j,
                   {"patch_size", "lr", "lambda_s", "lambda_w", "pretrain_epochs", "joint_epochs",
                    "steps_per_epoch", "seed", "augment", "augment_magnitude", "lr_decay_every",
                    "lr_decay_gamma", "validation_subjects", "early_stopping_patience", "log_wall_time", "arch"},
                   "config");
    TrainConfig c;
    read_key(j, "patch_size", c.patch_size);
    read_key(j, "lr", c.lr);
    read_key(j, "lambda_s", c.lambda_s);
    read_key(j, "lambda_w", c.lambda_w);
    read_key(j, "pretrain_epochs", c.pretrain_epochs);
    read_key(j, "joint_epochs", c.joint_epochs);
    read_key(j, "steps_per_epoch", c.steps_per_epoch);
    read_key(j, "seed", c.seed);
    read_key(j, "augment", c.augment);
    read_key(j, "augment_magnitude", c.augment_magnitude);
    read_key(j, "lr_decay_every", c.lr_decay_every);
    read_key(j, "lr_decay_gamma", c.lr_decay_gamma);
    read_key(j, "validation_subjects", c.validation_subjects);
    read_key(j, "early_stopping_patience", c.early_stopping_patience);
    read_key(j, "log_wall_time", c.log_wall_time);
    if (j.contains("arch")) {
        c.arch = arch_from_json(j.at("arch"));
    }
    c.validate();
    return c;
}

json to_json(const ArchConfig& a)
{
    return json{{"base_channels", a.base_channels},
                {"depth", a.depth},
                {"kernel_size", a.kernel_size},
                {"in_channels", a.in_channels},
                {"num_partial_classes", a.num_partial_classes},
                {"num_full_classes", a.num_full_classes}};
}

json to_json(const TrainConfig& c)
{
    return json{{"patch_size", c.patch_size},
                {"lr", c.lr},
                {"lambda_s", c.lambda_s},
                {"lambda_w", c.lambda_w},
                {"pretrain_epochs", c.pretrain_epochs},
                {"joint_epochs", c.joint_epochs},
                {"steps_per_epoch", c.steps_per_epoch},
                {"seed", c.seed},
                {"augment", c.augment},
                {"augment_magnitude", c.augment_magnitude},
                {"lr_decay_every", c.lr_decay_every},
                {"lr_decay_gamma", c.lr_decay_gamma},
                {"validation_subjects", c.validation_subjects},
                {"early_stopping_patience", c.early_stopping_patience},
                {"log_wall_time", c.log_wall_time},
                {"arch", to_json(c.arch)}};
}

TrainConfig load_train_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open config '" + path.string() + "'");
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return train_config_from_json(j);
}

// ---------------------------------------------------------------- losses --

template <typename Scalar>
Var<Scalar> loss_partial(Tape<Scalar>& tape, const Var<Scalar>& logits_w, const LabelVolume& target_w)
{
    if (!logits_w || logits_w->rank() != 4 || logits_w->extent(1) != target_w.dims[0]
        || logits_w->extent(2) != target_w.dims[1] || logits_w->extent(3) != target_w.dims[2]) {
        throw std::invalid_argument("loss: logits and target extents differ");
    }
    return cross_entropy(tape, softmax_channels(tape, logits_w), std::span<const std::uint16_t>(target_w.data));
}

template <typename Scalar>
JointLoss<Scalar> loss_joint(Tape<Scalar>& tape, const ForwardOutput<Scalar>& out, const LabelVolume& target_s,
                             const LabelVolume& target_w, double lambda_s, double lambda_w)
{
    if (!out.logits_s) {
        throw std::invalid_argument("loss_joint: model has no full-task head");
    }
    JointLoss<Scalar> l;
    l.full = loss_partial(tape, out.logits_s, target_s);
    l.partial = loss_partial(tape, out.logits_w, target_w);
    l.total = add(tape, scale(tape, l.full, static_cast<Scalar>(lambda_s)),
                  scale(tape, l.partial, static_cast<Scalar>(lambda_w)));
    return l;
}

template Var<float> loss_partial(Tape<float>&, const Var<float>&, const LabelVolume&);
template Var<double> loss_partial(Tape<double>&, const Var<double>&, const LabelVolume&);
template JointLoss<float> loss_joint(Tape<float>&, const ForwardOutput<float>&, const LabelVolume&,
                                     const LabelVolume&, double, double);
template JointLoss<double> loss_joint(Tape<double>&, const ForwardOutput<double>&, const LabelVolume&,
                                      const LabelVolume&, double, double);

// ------------------------------------------------------------------- log --

std::string TrainLog::to_csv() const
{
    std::ostringstream os;
    os.precision(9);
    os << "step,stage,loss_total,loss_w,loss_s,wall_ms\n";
    for (const auto& r : records) {
        os << r.step << ',' << r.stage << ',' << r.loss_total << ',' << r.loss_w << ',';
        if (std::isnan(r.loss_s)) {
            os << "nan";
        } else {
            os << r.loss_s;
        }
        os << ',' << static_cast<std::int64_t>(std::llround(r.wall_ms)) << '\n';
    }
    return os.str();
}

void TrainLog::write_csv(const std::filesystem::path& path) const
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    out << to_csv();
}

// ----------------------------------------------------------------- loops --

namespace {

struct Patch {
    Var<float> image;
    std::vector<LabelVolume> labels;
};

Var<float> to_input(const Volume& v)
{
    Tensor<float> t({1, v.dims[0], v.dims[1], v.dims[2]});
    std::copy(v.data.begin(), v.data.end(), t.ptr());
    return make_var(std::move(t));
}

Patch draw_patch(const Volume& image, std::span<const LabelVolume> labels, const TrainConfig& c,
                 const std::string& stage, std::int64_t draw)
{
    Rng crop = make_rng(c.seed, stage + ".patch", static_cast<std::uint64_t>(draw));
    PatchSample s = sample_patch(image, labels, c.patch_size, crop);
    if (c.augment && c.augment_magnitude > 0.0) {
        Rng warp = make_rng(c.seed, stage + ".augment", static_cast<std::uint64_t>(draw));
        DeformedSample d = elastic_deform(s.image, s.labels, c.augment_magnitude, warp);
        return {to_input(d.image), std::move(d.labels)};
    }
    return {to_input(s.image), std::move(s.labels)};
}

// Deterministic centred crop used for validation.
Patch centre_patch(const Volume& image, std::span<const LabelVolume> labels, std::int64_t size)
{
    std::vector<LabelVolume> cropped;
    Volume v(Dims{size, size, size}, image.spacing);
    std::array<std::int64_t, 3> corner{};
    for (int a = 0; a < 3; ++a) {
        if (size > image.dims[a]) {
            throw std::invalid_argument("validation: patch exceeds volume");
        }
        corner[a] = (image.dims[a] - size) / 2;
    }
    for (std::int64_t z = 0; z < size; ++z)
        for (std::int64_t y = 0; y < size; ++y)
            for (std::int64_t x = 0; x < size; ++x)
                v.at(z, y, x) = image.at(corner[0] + z, corner[1] + y, corner[2] + x);
    for (const auto& l : labels) {
        LabelVolume o(Dims{size, size, size}, l.num_classes, l.spacing);
        for (std::int64_t z = 0; z < size; ++z)
            for (std::int64_t y = 0; y < size; ++y)
                for (std::int64_t x = 0; x < size; ++x)
                    o.at(z, y, x) = l.at(corner[0] + z, corner[1] + y, corner[2] + x);
        cropped.push_back(std::move(o));
    }
    return {to_input(v), std::move(cropped)};
}

struct StepLosses {
    double total;
    double w;
    double s;
};

// Shared epoch/step driver for both stages. step(subject, draw) runs one
// optimisation step; validate() returns the held-out loss. `stage` names the
// RNG streams, `label` is what the log records.
template <typename StepFn, typename ValFn>
void run_epochs(const std::string& stage, const std::string& label, int epochs, std::size_t train_count, const TrainConfig& c,
                AdamState<float>& adam, TrainLog& log, StepFn&& step, ValFn&& validate)
{
    const std::int64_t steps = c.steps_per_epoch > 0 ? c.steps_per_epoch : static_cast<std::int64_t>(train_count);
    std::int64_t draw = 0;
    double best_val = std::numeric_limits<double>::infinity();
    int stale = 0;
    const auto start = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> order(train_count);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng = make_rng(c.seed, stage + ".order", static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::int64_t s = 0; s < steps; ++s, ++draw) {
            adam.options.lr = c.lr;
            if (c.lr_decay_every > 0) {
                adam.options.lr = c.lr * std::pow(c.lr_decay_gamma, static_cast<double>(draw / c.lr_decay_every));
            }
            const StepLosses l = step(order[static_cast<std::size_t>(s) % train_count], draw);
            if (!std::isfinite(l.total)) {
                throw DivergenceError(stage + ": loss became non-finite at step " + std::to_string(draw));
            }
            StepRecord r{draw, label, l.total, l.w, l.s, 0.0};
            if (c.log_wall_time) {
                r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            }
            log.records.push_back(r);
        }
        if (c.validation_subjects > 0) {
            const double v = validate();
            log.validation_losses.push_back(v);
            if (v < best_val) {
                best_val = v;
                stale = 0;
            } else if (c.early_stopping_patience > 0 && ++stale >= c.early_stopping_patience) {
                break;
            }
        }
    }
}

template <typename Subject>
std::size_t split_training(const std::vector<Subject>& data, const TrainConfig& c, const char* stage)
{
    if (data.empty()) {
        throw std::invalid_argument(std::string(stage) + ": dataset is empty");
    }
    const auto val = static_cast<std::size_t>(c.validation_subjects);
    if (val >= data.size()) {
        throw std::invalid_argument(std::string(stage) + ": validation split leaves no training subjects");
    }
    return data.size() - val;
}

} // namespace

PretrainResult pretrain(const std::vector<PartialSubject>& data, const TrainConfig& config)
{
    config.validate();
    const std::size_t n_train = split_training(data, config, "pretrain");
    for (const auto& s : data) {
        if (s.partial.observed_classes() > config.arch.num_partial_classes) {
            throw std::invalid_argument("pretrain: subject '" + s.id + "' has labels beyond "
                                        + std::to_string(config.arch.num_partial_classes) + " partial classes");
        }
    }
    PretrainResult result;
    result.checkpoint.model = build_unet<float>(config.arch, derive_seed(config.seed, "pretrain.init"));
    AdamState<float> adam;
    adam.options.lr = config.lr;
    Model<float>& model = result.checkpoint.model;

    auto step = [&](std::size_t subject, std::int64_t draw) {
        const auto& s = data[subject];
        Patch p = draw_patch(s.image, std::span<const LabelVolume>(&s.partial, 1), config, "pretrain", draw);
        Tape<float> tape;
        auto out = forward(model, p.image, tape);
        auto loss = loss_partial(tape, out.logits_w, p.labels[0]);
        const double value = loss->data()[0];
        if (!std::isfinite(value)) {
            return StepLosses{value, value, std::numeric_limits<double>::quiet_NaN()};
        }
        tape.backward(loss);
        adam_step(model.params, adam);
        model.params.zero_grad();
        return StepLosses{value, value, std::numeric_limits<double>::quiet_NaN()};
    };
    auto validate = [&] {
        double total = 0.0;
        for (std::size_t i = n_train; i < data.size(); ++i) {
            Patch p = centre_patch(data[i].image, std::span<const LabelVolume>(&data[i].partial, 1),
                                   config.patch_size);
            Tape<float> tape = Tape<float>::inference();
            total += loss_partial(tape, forward(model, p.image, tape).logits_w, p.labels[0])->data()[0];
        }
        return total / static_cast<double>(data.size() - n_train);
    };
    run_epochs("pretrain", "pretrain", config.pretrain_epochs, n_train, config, adam, result.log, step, validate);
    result.checkpoint.adam = std::move(adam);
    return result;
}

JointResult joint_train(const std::vector<FullSubject>& data, const std::optional<Checkpoint>& init,
                        const TrainConfig& config)
{
    config.validate();
    const std::size_t n_train = split_training(data, config, "joint_train");
    JointResult result;
    result.checkpoint.model = build_monet<float>(config.arch, derive_seed(config.seed, "joint.init"));
    Model<float>& model = result.checkpoint.model;
    if (init) {
        if (init->model.kind != ModelKind::unet) {
            throw std::invalid_argument("joint_train: initial checkpoint must hold a stage-1 network");
        }
        check_layout(init->model.arch, ModelKind::unet, init->model.params);
        result.manifest = transfer_params(init->model, model);
        result.transferred = true;
    }

    std::vector<LabelVolume> partial;
    for (const auto& s : data) {
        if (s.full.observed_classes() > config.arch.num_full_classes) {
            throw std::invalid_argument("joint_train: subject '" + s.id + "' has labels beyond "
                                        + std::to_string(config.arch.num_full_classes) + " full classes");
        }
        partial.push_back(extract_partial(s.full, s.map));
        if (partial.back().num_classes > config.arch.num_partial_classes) {
            throw std::invalid_argument("joint_train: label map of '" + s.id + "' exceeds the partial head");
        }
    }

    AdamState<float> adam;
    adam.options.lr = config.lr;
    auto step = [&](std::size_t subject, std::int64_t draw) {
        const auto& s = data[subject];
        const LabelVolume pair[2] = {s.full, partial[subject]};
        Patch p = draw_patch(s.image, pair, config, "joint", draw);
        Tape<float> tape;
        auto out = forward(model, p.image, tape);
        auto l = loss_joint(tape, out, p.labels[0], p.labels[1], config.lambda_s, config.lambda_w);
        const StepLosses values{l.total->data()[0], l.partial->data()[0], l.full->data()[0]};
        if (!std::isfinite(values.total)) {
            return values;
        }
        tape.backward(l.total);
        adam_step(model.params, adam);
        model.params.zero_grad();
        return values;
    };
    auto validate = [&] {
        double total = 0.0;
        for (std::size_t i = n_train; i < data.size(); ++i) {
            const LabelVolume pair[2] = {data[i].full, partial[i]};
            Patch p = centre_patch(data[i].image, pair, config.patch_size);
            Tape<float> tape = Tape<float>::inference();
            auto out = forward(model, p.image, tape);
            total += loss_joint(tape, out, p.labels[0], p.labels[1], config.lambda_s, config.lambda_w)
                         .total->data()[0];
        }
        return total / static_cast<double>(data.size() - n_train);
    };
    run_epochs("joint", init ? "joint" : "joint_scratch", config.joint_epochs, n_train, config, adam, result.log, step, validate);
    result.checkpoint.adam = std::move(adam);
    return result;
}

} // namespace mseg
