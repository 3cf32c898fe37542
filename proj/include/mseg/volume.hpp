#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace mseg {

using Dims = std::array<std::int64_t, 3>;       // D, H, W; W varies fastest
using Spacing = std::array<float, 3>;

inline std::int64_t voxel_count(const Dims& d) { return d[0] * d[1] * d[2]; }

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Volume {
    Dims dims{0, 0, 0};
    Spacing spacing{1.f, 1.f, 1.f};
    std::vector<float> data;

    Volume() = default;
    explicit Volume(Dims d, Spacing s = {1.f, 1.f, 1.f})
        : dims(d)
        , spacing(s)
        , data(static_cast<std::size_t>(voxel_count(d)), 0.f)
    {
    }

    std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const
    {
        return (z * dims[1] + y) * dims[2] + x;
    }
    float& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[static_cast<std::size_t>(index(z, y, x))]; }
    float at(std::int64_t z, std::int64_t y, std::int64_t x) const
    {
        return data[static_cast<std::size_t>(index(z, y, x))];
    }

    void validate() const;
};

struct LabelVolume {
    Dims dims{0, 0, 0};
    Spacing spacing{1.f, 1.f, 1.f};
    std::vector<std::uint16_t> data;
    int num_classes = 1;

    LabelVolume() = default;
    LabelVolume(Dims d, int classes, Spacing s = {1.f, 1.f, 1.f})
        : dims(d)
        , spacing(s)
        , data(static_cast<std::size_t>(voxel_count(d)), 0)
        , num_classes(classes)
    {
    }

    std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const
    {
        return (z * dims[1] + y) * dims[2] + x;
    }
    std::uint16_t& at(std::int64_t z, std::int64_t y, std::int64_t x)
    {
        return data[static_cast<std::size_t>(index(z, y, x))];
    }
    std::uint16_t at(std::int64_t z, std::int64_t y, std::int64_t x) const
    {
        return data[static_cast<std::size_t>(index(z, y, x))];
    }

    /// Largest id present plus one (at least 1).
    int observed_classes() const;
    void validate() const;
};

using AnyVolume = std::variant<Volume, LabelVolume>;

/// Native layout, little-endian throughout:
///
///     "MSEGVOL1"  u32 dims[3] (D,H,W)  f32 spacing[3]  u8 dtype (0 f32 image, 1 u16 labels)
///     voxels, W fastest
///
/// Paths whose header starts with sizeof_hdr == 348 are read as NIfTI-1
/// (single file, uint8/int16/float32, orientation ignored) and always come
/// back as an image volume.
AnyVolume read_volume(const std::filesystem::path& path);
Volume read_image(const std::filesystem::path& path);
/// Native label files directly; integer-valued images (e.g. NIfTI uint8)
/// are converted. num_classes is set from the largest id present.
LabelVolume read_labels(const std::filesystem::path& path);

void write_volume(const std::filesystem::path& path, const Volume& v);
void write_volume(const std::filesystem::path& path, const LabelVolume& v);

std::vector<std::uint8_t> encode_volume(const Volume& v);
std::vector<std::uint8_t> encode_volume(const LabelVolume& v);
AnyVolume decode_volume(const std::vector<std::uint8_t>& bytes);

/// Integer-valued image to labels; throws on negative or fractional values.
LabelVolume to_labels(const Volume& v);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

} // namespace mseg
