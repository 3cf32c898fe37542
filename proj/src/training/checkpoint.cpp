#include "mseg/training.hpp"

#include "../bytes.hpp"

#include <cstring>

namespace mseg {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'N', 'E', 'T', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 8;

using Reader = bytes::Reader<FormatError>;

void put_floats(bytes::Writer& w, const float* data, std::size_t n)
{
    for (std::size_t i = 0; i < n; ++i) {
        w.put<float>(data[i]);
    }
}

void get_floats(Reader& r, float* data, std::size_t n)
{
    r.need(n * sizeof(float));
    for (std::size_t i = 0; i < n; ++i) {
        data[i] = r.get<float>();
    }
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt)
{
    const auto& m = ckpt.model;
    check_layout(m.arch, m.kind, m.params);
    bytes::Writer w;
    w.put_raw(kMagic, sizeof(kMagic));
    w.put<std::uint32_t>(kVersion);
    w.put<std::uint32_t>(m.kind == ModelKind::unet ? 0u : 1u);
    for (int v : {m.arch.base_channels, m.arch.depth, m.arch.kernel_size, m.arch.in_channels,
                  m.arch.num_partial_classes, m.arch.num_full_classes}) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.params.size()));
    for (const auto& e : m.params) {
        w.put_string(e.name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(e.var->rank()));
        for (Index d : e.var->shape()) {
            w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
        }
        put_floats(w, e.var->ptr(), static_cast<std::size_t>(e.var->size()));
    }
    if (!ckpt.adam) {
        w.put<std::uint32_t>(0);
        return std::move(w.buffer());
    }
    const auto& a = *ckpt.adam;
    w.put<std::uint32_t>(1);
    w.put<std::int64_t>(a.step);
    w.put<double>(a.options.lr);
    w.put<double>(a.options.beta1);
    w.put<double>(a.options.beta2);
    w.put<double>(a.options.epsilon);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.moments.size()));
    for (const auto& mom : a.moments) {
        w.put_string(mom.name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(mom.m.size()));
        put_floats(w, mom.m.data(), static_cast<std::size_t>(mom.m.size()));
        put_floats(w, mom.v.data(), static_cast<std::size_t>(mom.v.size()));
    }
    return std::move(w.buffer());
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& buf)
{
    Reader r(buf, "checkpoint");
    r.need(sizeof(kMagic));
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("checkpoint: bad magic (expected MONETCKP)");
    }
    for (std::size_t i = 0; i < sizeof(kMagic); ++i) {
        r.get<std::uint8_t>();
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    const auto kind = r.get<std::uint32_t>();
    if (kind > 1) {
        throw FormatError("checkpoint: unknown model kind " + std::to_string(kind));
    }
    ckpt.model.kind = kind == 0 ? ModelKind::unet : ModelKind::monet;
    auto& a = ckpt.model.arch;
    for (int* field : {&a.base_channels, &a.depth, &a.kernel_size, &a.in_channels, &a.num_partial_classes,
                       &a.num_full_classes}) {
        *field = static_cast<int>(r.get<std::uint32_t>());
    }
    try {
        a.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }

    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_string();
        if (!is_valid_param_name(name)) {
            throw FormatError("checkpoint: parameter name '" + name + "' violates the name grammar");
        }
        const auto rank = r.get<std::uint32_t>();
        if (rank == 0 || rank > kMaxRank) {
            throw FormatError("checkpoint: parameter '" + name + "' has invalid rank " + std::to_string(rank));
        }
        Shape shape;
        std::uint64_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto e = r.get<std::uint32_t>();
            n *= e;
            if (n > r.remaining()) {
                throw FormatError("checkpoint: parameter '" + name + "' dims exceed the payload");
            }
            shape.push_back(static_cast<Index>(e));
        }
        Tensor<float> t(shape);
        get_floats(r, t.ptr(), static_cast<std::size_t>(t.size()));
        ckpt.model.params.add(std::move(name), std::move(t));
    }
    try {
        check_layout(ckpt.model.arch, ckpt.model.kind, ckpt.model.params);
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }

    const auto has_adam = r.get<std::uint32_t>();
    if (has_adam > 1) {
        throw FormatError("checkpoint: invalid optimizer-state flag");
    }
    if (has_adam == 1) {
        AdamState<float> s;
        s.step = r.get<std::int64_t>();
        s.options.lr = r.get<double>();
        s.options.beta1 = r.get<double>();
        s.options.beta2 = r.get<double>();
        s.options.epsilon = r.get<double>();
        const auto n_mom = r.get<std::uint32_t>();
        if (n_mom != 0 && n_mom != ckpt.model.params.size()) {
            throw FormatError("checkpoint: optimizer state covers " + std::to_string(n_mom) + " of "
                              + std::to_string(ckpt.model.params.size()) + " parameters");
        }
        auto it = ckpt.model.params.begin();
        for (std::uint32_t i = 0; i < n_mom; ++i, ++it) {
            std::string name = r.get_string();
            if (name != it->name) {
                throw FormatError("checkpoint: optimizer state for '" + name + "' out of order");
            }
            const auto len = r.get<std::uint32_t>();
            if (static_cast<Index>(len) != it->var->size()) {
                throw FormatError("checkpoint: optimizer state for '" + name + "' has wrong length");
            }
            AdamState<float>::Moments mom{std::move(name), Tensor<float>::Buffer(len), Tensor<float>::Buffer(len)};
            get_floats(r, mom.m.data(), len);
            get_floats(r, mom.v.data(), len);
            s.moments.push_back(std::move(mom));
        }
        ckpt.adam = std::move(s);
    }
    if (r.remaining() != 0) {
        throw FormatError("checkpoint: trailing bytes after payload");
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig& expected, ModelKind kind)
{
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.model.kind != kind) {
        throw FormatError("checkpoint '" + path.string() + "' holds a " + to_string(ckpt.model.kind)
                          + ", expected a " + to_string(kind));
    }
    try {
        check_layout(expected, kind, ckpt.model.params);
    } catch (const std::invalid_argument& e) {
        throw FormatError("checkpoint '" + path.string() + "' does not match the configured architecture: "
                          + e.what());
    }
    ckpt.model.arch = expected;
    return ckpt;
}

} // namespace mseg
