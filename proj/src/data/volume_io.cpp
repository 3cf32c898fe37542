#include "mseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace mseg {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'E', 'G', 'V', 'O', 'L', '1'};
constexpr std::size_t kHeaderBytes = 8 + 12 + 12 + 1;
constexpr std::int64_t kMaxVoxels = std::int64_t{1} << 31;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T byteswap_if_big(T v)
{
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        std::reverse(b, b + sizeof(T));
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v)
{
    v = byteswap_if_big(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t offset)
{
    if (offset + sizeof(T) > in.size()) {
        throw FormatError("volume: truncated header");
    }
    T v;
    std::memcpy(&v, in.data() + offset, sizeof(T));
    return byteswap_if_big(v);
}

void encode_header(std::vector<std::uint8_t>& out, const Dims& dims, const Spacing& spacing, std::uint8_t dtype)
{
    out.insert(out.end(), kMagic, kMagic + 8);
    for (auto d : dims) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    for (auto s : spacing) {
        put<float>(out, s);
    }
    out.push_back(dtype);
}

Dims checked_dims(std::int64_t a, std::int64_t b, std::int64_t c, const char* what)
{
    Dims d{a, b, c};
    for (auto e : d) {
        if (e <= 0) {
            throw FormatError(std::string(what) + ": non-positive dimension");
        }
    }
    if (d[0] > kMaxVoxels / d[1] || d[0] * d[1] > kMaxVoxels / d[2]) {
        throw FormatError(std::string(what) + ": dimensions overflow the voxel limit");
    }
    return d;
}

AnyVolume decode_native(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < kHeaderBytes) {
        throw FormatError("volume: truncated header");
    }
    if (std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw FormatError("volume: bad magic (expected MSEGVOL1)");
    }
    const Dims dims = checked_dims(get<std::uint32_t>(bytes, 8), get<std::uint32_t>(bytes, 12),
                                   get<std::uint32_t>(bytes, 16), "volume");
    const Spacing spacing{get<float>(bytes, 20), get<float>(bytes, 24), get<float>(bytes, 28)};
    const std::uint8_t dtype = bytes[32];
    const auto n = static_cast<std::size_t>(voxel_count(dims));
    std::size_t offset = kHeaderBytes;
    if (dtype == 0) {
        if (bytes.size() != offset + n * 4) {
            throw FormatError("volume: payload length does not match dims (truncated or trailing bytes)");
        }
        Volume v(dims, spacing);
        for (std::size_t i = 0; i < n; ++i, offset += 4) {
            v.data[i] = get<float>(bytes, offset);
        }
        return v;
    }
    if (dtype == 1) {
        if (bytes.size() != offset + n * 2) {
            throw FormatError("volume: payload length does not match dims (truncated or trailing bytes)");
        }
        LabelVolume v(dims, 1, spacing);
        for (std::size_t i = 0; i < n; ++i, offset += 2) {
            v.data[i] = get<std::uint16_t>(bytes, offset);
        }
        v.num_classes = v.observed_classes();
        return v;
    }
    throw FormatError("volume: unknown dtype code " + std::to_string(dtype));
}

// NIfTI-1 single-file subset: header fields at their public byte offsets.
Volume decode_nifti(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < 348) {
        throw FormatError("nifti: truncated header");
    }
    const auto ndim = get<std::int16_t>(bytes, 40);
    if (ndim < 1 || ndim > 7) {
        throw FormatError("nifti: invalid dim[0] = " + std::to_string(ndim));
    }
    std::int64_t extent[3] = {1, 1, 1};
    for (int i = 0; i < 3 && i < ndim; ++i) {
        extent[i] = get<std::int16_t>(bytes, 42 + 2 * static_cast<std::size_t>(i));
    }
    for (int i = 3; i < ndim; ++i) {
        if (get<std::int16_t>(bytes, 42 + 2 * static_cast<std::size_t>(i)) > 1) {
            throw FormatError("nifti: only 3D volumes are supported");
        }
    }
    const auto datatype = get<std::int16_t>(bytes, 70);
    float pixdim[3];
    for (int i = 0; i < 3; ++i) {
        pixdim[i] = get<float>(bytes, 80 + 4 * static_cast<std::size_t>(i));
    }
    const float vox_offset = get<float>(bytes, 108);
    const float slope = get<float>(bytes, 112);
    const float inter = get<float>(bytes, 116);

    // NIfTI stores x fastest, which maps onto our W axis.
    const Dims dims = checked_dims(extent[2], extent[1], extent[0], "nifti");
    auto positive = [](float s) { return std::isfinite(s) && s > 0.f ? s : 1.f; };
    Volume v(dims, {positive(pixdim[2]), positive(pixdim[1]), positive(pixdim[0])});

    std::size_t width = 0;
    switch (datatype) {
    case 2: width = 1; break;  // uint8
    case 4: width = 2; break;  // int16
    case 16: width = 4; break; // float32
    default: throw FormatError("nifti: unsupported datatype code " + std::to_string(datatype));
    }
    const auto offset = static_cast<std::size_t>(std::max(352.f, vox_offset));
    const auto n = static_cast<std::size_t>(voxel_count(dims));
    if (bytes.size() < offset + n * width) {
        throw FormatError("nifti: truncated voxel payload");
    }
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t at = offset + i * width;
        float value = 0.f;
        switch (datatype) {
        case 2: value = bytes[at]; break;
        case 4: value = get<std::int16_t>(bytes, at); break;
        default: value = get<float>(bytes, at); break;
        }
        v.data[i] = value;
    }
    if (slope != 0.f && std::isfinite(slope) && (slope != 1.f || inter != 0.f)) {
        for (auto& x : v.data) {
            x = x * slope + inter;
        }
    }
    return v;
}

} // namespace

void Volume::validate() const
{
    for (auto d : dims) {
        if (d <= 0) throw std::invalid_argument("volume: non-positive dimension");
    }
    for (auto s : spacing) {
        if (!(s > 0.f)) throw std::invalid_argument("volume: non-positive spacing");
    }
    if (static_cast<std::int64_t>(data.size()) != voxel_count(dims)) {
        throw std::invalid_argument("volume: data length does not match dims");
    }
}

int LabelVolume::observed_classes() const
{
    const auto it = std::max_element(data.begin(), data.end());
    return it == data.end() ? 1 : static_cast<int>(*it) + 1;
}

void LabelVolume::validate() const
{
    for (auto d : dims) {
        if (d <= 0) throw std::invalid_argument("labels: non-positive dimension");
    }
    if (static_cast<std::int64_t>(data.size()) != voxel_count(dims)) {
        throw std::invalid_argument("labels: data length does not match dims");
    }
    if (observed_classes() > num_classes) {
        throw std::invalid_argument("labels: id " + std::to_string(observed_classes() - 1) + " exceeds "
                                    + std::to_string(num_classes) + " classes");
    }
}

std::vector<std::uint8_t> encode_volume(const Volume& v)
{
    v.validate();
    std::vector<std::uint8_t> out;
    out.reserve(kHeaderBytes + v.data.size() * 4);
    encode_header(out, v.dims, v.spacing, 0);
    for (float x : v.data) {
        put<float>(out, x);
    }
    return out;
}

std::vector<std::uint8_t> encode_volume(const LabelVolume& v)
{
    v.validate();
    std::vector<std::uint8_t> out;
    out.reserve(kHeaderBytes + v.data.size() * 2);
    encode_header(out, v.dims, v.spacing, 1);
    for (auto x : v.data) {
        put<std::uint16_t>(out, x);
    }
    return out;
}

AnyVolume decode_volume(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() >= 4 && get<std::int32_t>(bytes, 0) == 348) {
        return decode_nifti(bytes);
    }
    return decode_native(bytes);
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path.string() + "' for reading");
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("write to '" + path.string() + "' failed");
    }
}

AnyVolume read_volume(const std::filesystem::path& path) { return decode_volume(read_file_bytes(path)); }

Volume read_image(const std::filesystem::path& path)
{
    auto any = read_volume(path);
    if (auto* v = std::get_if<Volume>(&any)) {
        return std::move(*v);
    }
    throw FormatError("'" + path.string() + "' holds labels, expected an image");
}

LabelVolume to_labels(const Volume& v)
{
    LabelVolume out(v.dims, 1, v.spacing);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        const float x = v.data[i];
        if (!(x >= 0.f) || x > 65535.f || std::floor(x) != x) {
            throw FormatError("labels: voxel value " + std::to_string(x) + " is not a valid class id");
        }
        out.data[i] = static_cast<std::uint16_t>(x);
    }
    out.num_classes = out.observed_classes();
    return out;
}

LabelVolume read_labels(const std::filesystem::path& path)
{
    auto any = read_volume(path);
    if (auto* l = std::get_if<LabelVolume>(&any)) {
        return std::move(*l);
    }
    return to_labels(std::get<Volume>(any));
}

void write_volume(const std::filesystem::path& path, const Volume& v) { write_file_bytes(path, encode_volume(v)); }

void write_volume(const std::filesystem::path& path, const LabelVolume& v)
{
    write_file_bytes(path, encode_volume(v));
}

} // namespace mseg
