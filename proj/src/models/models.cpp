#include "mseg/models.hpp"

#include "mseg/rng.hpp"

#include <cmath>
#include <random>
#include <regex>
#include <stdexcept>

namespace mseg {

void ArchConfig::validate() const
{
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid architecture: " + what); };
    if (depth < 1) fail("depth must be >= 1");
    if (depth > 8) fail("depth must be <= 8");
    if (base_channels < 1) fail("base_channels must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) fail("kernel_size must be odd");
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (num_partial_classes < 2) fail("num_partial_classes must be >= 2");
    if (num_full_classes < 2) fail("num_full_classes must be >= 2");
}

std::string to_string(ModelKind kind) { return kind == ModelKind::unet ? "unet" : "monet"; }

bool is_valid_param_name(const std::string& name)
{
    static const std::regex grammar(
        R"(^(encoder\.(level[0-9]+\.conv[0-9]+|bottleneck\.conv[0-9]+))"
        R"(|(decoder|decoder_w|decoder_s)\.(level[0-9]+\.(conv[0-9]+|up)|head))\.(weight|bias)$)");
    return std::regex_match(name, grammar);
}

namespace {

void add_conv(std::vector<ParamSpec>& out, const std::string& prefix, Index cin, Index cout, Index k)
{
    out.push_back({prefix + ".weight", {cout, cin, k, k, k}, cin * k * k * k});
    out.push_back({prefix + ".bias", {cout}, cin * k * k * k});
}

Index level_channels(const ArchConfig& a, int level) { return static_cast<Index>(a.base_channels) << level; }

void add_decoder(std::vector<ParamSpec>& out, const ArchConfig& a, const std::string& group, int classes)
{
    const Index k = a.kernel_size;
    for (int l = a.depth - 1; l >= 0; --l) {
        const std::string p = group + ".level" + std::to_string(l);
        const Index c = level_channels(a, l);
        add_conv(out, p + ".up", level_channels(a, l + 1), c, k);
        add_conv(out, p + ".conv0", 2 * c, c, k);
        add_conv(out, p + ".conv1", c, c, k);
    }
    add_conv(out, group + ".head", level_channels(a, 0), classes, 1);
}

} // namespace

std::vector<ParamSpec> parameter_layout(const ArchConfig& a, ModelKind kind)
{
    a.validate();
    std::vector<ParamSpec> out;
    const Index k = a.kernel_size;
    Index cin = a.in_channels;
    for (int l = 0; l < a.depth; ++l) {
        const std::string p = "encoder.level" + std::to_string(l);
        const Index c = level_channels(a, l);
        add_conv(out, p + ".conv0", cin, c, k);
        add_conv(out, p + ".conv1", c, c, k);
        cin = c;
    }
    const Index cb = level_channels(a, a.depth);
    add_conv(out, "encoder.bottleneck.conv0", cin, cb, k);
    add_conv(out, "encoder.bottleneck.conv1", cb, cb, k);
    if (kind == ModelKind::unet) {
        add_decoder(out, a, "decoder", a.num_partial_classes);
    } else {
        add_decoder(out, a, "decoder_w", a.num_partial_classes);
        add_decoder(out, a, "decoder_s", a.num_full_classes);
    }
    return out;
}

namespace {

template <typename Scalar>
Tensor<Scalar> init_tensor(const ParamSpec& spec, std::uint64_t seed)
{
    Tensor<Scalar> t(spec.shape);
    if (spec.shape.size() == 1) {
        return t;
    }
    // He initialisation with the LeakyReLU gain sqrt(2 / (1 + a^2)).
    constexpr double slope = 0.01;
    const double stddev = std::sqrt(2.0 / (1.0 + slope * slope)) / std::sqrt(static_cast<double>(spec.fan_in));
    Rng rng(derive_seed(seed, spec.name));
    std::normal_distribution<double> normal(0.0, stddev);
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = static_cast<Scalar>(normal(rng));
    }
    return t;
}

template <typename Scalar>
Model<Scalar> build(const ArchConfig& arch, ModelKind kind, std::uint64_t seed)
{
    Model<Scalar> m;
    m.arch = arch;
    m.kind = kind;
    for (const auto& spec : parameter_layout(arch, kind)) {
        m.params.add(spec.name, init_tensor<Scalar>(spec, seed));
    }
    return m;
}

} // namespace

template <typename Scalar>
Model<Scalar> build_unet(const ArchConfig& arch, std::uint64_t seed)
{
    return build<Scalar>(arch, ModelKind::unet, seed);
}

template <typename Scalar>
Model<Scalar> build_monet(const ArchConfig& arch, std::uint64_t seed)
{
    return build<Scalar>(arch, ModelKind::monet, seed);
}

template <typename Scalar>
void check_layout(const ArchConfig& arch, ModelKind kind, const ParameterSet<Scalar>& params)
{
    const auto layout = parameter_layout(arch, kind);
    std::size_t i = 0;
    for (const auto& e : params) {
        if (!is_valid_param_name(e.name)) {
            throw std::invalid_argument("parameter name '" + e.name + "' violates the name grammar");
        }
        if (i >= layout.size()) {
            throw std::invalid_argument("unexpected parameter '" + e.name + "' for " + to_string(kind));
        }
        const auto& spec = layout[i++];
        if (spec.name != e.name) {
            throw std::invalid_argument("parameter '" + e.name + "' found where '" + spec.name + "' was expected");
        }
        if (spec.shape != e.var->shape()) {
            throw std::invalid_argument("parameter '" + e.name + "' has shape " + shape_string(e.var->shape())
                                        + ", architecture expects " + shape_string(spec.shape));
        }
    }
    if (i != layout.size()) {
        throw std::invalid_argument("missing parameter '" + layout[i].name + "'");
    }
}

namespace {

template <typename Scalar>
Var<Scalar> conv_block(Tape<Scalar>& tape, const ParameterSet<Scalar>& p, const std::string& prefix,
                       const Var<Scalar>& x)
{
    return leaky_relu(tape, conv3d(tape, x, p.at(prefix + ".weight"), p.at(prefix + ".bias")), Scalar(0.01));
}

template <typename Scalar>
Var<Scalar> decode(Tape<Scalar>& tape, const Model<Scalar>& m, const std::string& group, Var<Scalar> y,
                   const std::vector<Var<Scalar>>& skips)
{
    const auto& p = m.params;
    for (int l = m.arch.depth - 1; l >= 0; --l) {
        const std::string level = group + ".level" + std::to_string(l);
        y = upsample_nearest(tape, y);
        y = conv_block(tape, p, level + ".up", y);
        y = concat_channels(tape, y, skips[static_cast<std::size_t>(l)]);
        y = conv_block(tape, p, level + ".conv0", y);
        y = conv_block(tape, p, level + ".conv1", y);
    }
    return conv3d(tape, y, p.at(group + ".head.weight"), p.at(group + ".head.bias"));
}

} // namespace

template <typename Scalar>
ForwardOutput<Scalar> forward(const Model<Scalar>& m, const Var<Scalar>& patch, Tape<Scalar>& tape)
{
    if (!patch || patch->rank() != 4 || patch->extent(0) != m.arch.in_channels) {
        throw std::invalid_argument("forward: patch must be [" + std::to_string(m.arch.in_channels)
                                    + ",D,H,W], got " + (patch ? shape_string(patch->shape()) : "null"));
    }
    const Index mult = m.arch.patch_multiple();
    for (Index axis = 1; axis < 4; ++axis) {
        if (patch->extent(axis) % mult != 0 || patch->extent(axis) == 0) {
            throw std::invalid_argument("forward: patch extents " + shape_string(patch->shape())
                                        + " must be positive multiples of " + std::to_string(mult));
        }
    }
    const auto& p = m.params;
    std::vector<Var<Scalar>> skips;
    Var<Scalar> x = patch;
    for (int l = 0; l < m.arch.depth; ++l) {
        const std::string level = "encoder.level" + std::to_string(l);
        x = conv_block(tape, p, level + ".conv0", x);
        x = conv_block(tape, p, level + ".conv1", x);
        skips.push_back(x);
        x = max_pool3d(tape, x);
    }
    x = conv_block(tape, p, "encoder.bottleneck.conv0", x);
    x = conv_block(tape, p, "encoder.bottleneck.conv1", x);

    ForwardOutput<Scalar> out;
    if (m.kind == ModelKind::unet) {
        out.logits_w = decode(tape, m, "decoder", x, skips);
    } else {
        out.logits_w = decode(tape, m, "decoder_w", x, skips);
        out.logits_s = decode(tape, m, "decoder_s", x, skips);
    }
    return out;
}

template <typename Scalar>
TransferManifest transfer_params(const Model<Scalar>& stage1, Model<Scalar>& monet)
{
    if (stage1.kind != ModelKind::unet || monet.kind != ModelKind::monet) {
        throw std::invalid_argument("transfer_params: expects a single-decoder source and a dual-decoder target");
    }
    const ArchConfig& a = stage1.arch;
    const ArchConfig& b = monet.arch;
    if (a.base_channels != b.base_channels || a.depth != b.depth || a.kernel_size != b.kernel_size
        || a.in_channels != b.in_channels || a.num_partial_classes != b.num_partial_classes) {
        throw std::invalid_argument("transfer_params: trunk architectures differ");
    }
    check_layout(a, ModelKind::unet, stage1.params);
    check_layout(b, ModelKind::monet, monet.params);

    TransferManifest manifest;
    auto copy = [&](const std::string& from, const std::string& to) {
        const auto& src = stage1.params.at(from);
        const auto& dst = monet.params.at(to);
        if (src->shape() != dst->shape()) {
            manifest.skipped.push_back(to);
            return;
        }
        dst->data() = src->data();
        manifest.copied.push_back({from, to});
    };
    const std::string dec = "decoder.";
    for (const auto& e : stage1.params) {
        if (e.name.starts_with("encoder.")) {
            copy(e.name, e.name);
        } else if (e.name.starts_with(dec)) {
            const std::string rest = e.name.substr(dec.size());
            copy(e.name, "decoder_w." + rest);
            copy(e.name, "decoder_s." + rest);
        } else {
            throw std::invalid_argument("transfer_params: unknown source parameter '" + e.name + "'");
        }
    }
    return manifest;
}

#define MSEG_INSTANTIATE(S)                                                                  \
    template Model<S> build_unet<S>(const ArchConfig&, std::uint64_t);                       \
    template Model<S> build_monet<S>(const ArchConfig&, std::uint64_t);                      \
    template void check_layout<S>(const ArchConfig&, ModelKind, const ParameterSet<S>&);     \
    template ForwardOutput<S> forward<S>(const Model<S>&, const Var<S>&, Tape<S>&);          \
    template TransferManifest transfer_params<S>(const Model<S>&, Model<S>&);

MSEG_INSTANTIATE(float)
MSEG_INSTANTIATE(double)

#undef MSEG_INSTANTIATE

} // namespace mseg
