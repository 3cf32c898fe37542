#pragma once

#include "mseg/rng.hpp"
#include "mseg/volume.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mseg {

/// Full-to-partial relabeling. Unlisted full ids map to background.
class LabelMap {
public:
    LabelMap() = default;
    explicit LabelMap(std::vector<std::pair<std::uint16_t, std::uint16_t>> pairs);

    /// Parses "full_id partial_id" lines; '#' starts a comment.
    static LabelMap parse(const std::string& text);
    static LabelMap read(const std::filesystem::path& path);
    std::string to_text() const;
    void write(const std::filesystem::path& path) const;

    const std::vector<std::pair<std::uint16_t, std::uint16_t>>& pairs() const { return pairs_; }
    /// P: partial ids run 1..P.
    int partial_count() const { return partial_count_; }
    std::uint16_t lookup(std::uint16_t full_id) const;

    bool operator==(const LabelMap&) const = default;

private:
    std::vector<std::pair<std::uint16_t, std::uint16_t>> pairs_;
    int partial_count_ = 0;
};

LabelVolume extract_partial(const LabelVolume& full, const LabelMap& map);

struct PhantomSpec {
    int size = 32;
    /// K: labels 1..K; label 1 is the enclosing shell.
    int num_structures = 6;
    /// P: interior labels exposed through the partial map.
    int partial_subset = 3;
    double noise_sigma = 0.05;
    /// Per-subject jitter, noise and placement retries.
    std::uint64_t seed = 0;
    /// Shared template (label intensities, nominal layout, label map).
    /// Subjects drawn with the same anatomy seed form one population.
    std::uint64_t anatomy_seed = 0;
    /// Per-axis centre jitter as a fraction of size.
    double jitter = 0.04;

    void validate() const;
};

struct Phantom {
    Volume image;
    LabelVolume labels;
    LabelMap map;
};

Phantom generate_phantom(const PhantomSpec& spec);

/// Zero mean, unit population std over every voxel.
Volume zscore_normalize(const Volume& v);

struct PatchSample {
    Volume image;
    std::vector<LabelVolume> labels;
    std::array<std::int64_t, 3> corner{0, 0, 0};
};

/// Cubic patch at a uniformly drawn corner; the same corner crops the
/// image and every label volume.
PatchSample sample_patch(const Volume& image, std::span<const LabelVolume> labels, std::int64_t size, Rng& rng);

struct DeformedSample {
    Volume image;
    std::vector<LabelVolume> labels;
};

inline constexpr int kElasticControlSpacing = 8;

/// Coarse random displacement grid (spacing 8, components uniform in
/// +-magnitude voxels), trilinearly upsampled. The image is resampled
/// trilinearly with zeros outside; labels use nearest neighbour with edge
/// clamping so no new ids can appear.
DeformedSample elastic_deform(const Volume& image, std::span<const LabelVolume> labels, double magnitude, Rng& rng);

} // namespace mseg
