#pragma once

#include "mseg/data.hpp"
#include "mseg/training.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mseg {

/// On-disk dataset:
///
///     DIR/manifest.json
///     DIR/case_0000/image.msegvol
///     DIR/case_0000/labels.msegvol    full labels
///     DIR/case_0000/labels.map
///     DIR/case_0000/partial.msegvol   partial labels (partial-only sets)
///
/// A case needs an image plus either partial.msegvol or the
/// labels.msegvol/labels.map pair.
struct PhantomSetOptions {
    int count = 1;
    int first_index = 0;
    PhantomSpec spec;
    /// Subject seeds are derived per case index from this.
    std::uint64_t seed = 0;
    /// Write only image + partial labels, as an automatically annotated pool.
    bool partial_only = false;
};

std::vector<std::filesystem::path> write_phantom_set(const std::filesystem::path& dir,
                                                     const PhantomSetOptions& options);

/// Seed of case `index` in a set generated with `seed`.
std::uint64_t phantom_case_seed(std::uint64_t seed, int index);

/// Case directories in name order; throws naming the path if DIR is missing.
std::vector<std::filesystem::path> list_cases(const std::filesystem::path& dir);

/// Images are z-score normalised on load.
std::vector<PartialSubject> load_partial_subjects(const std::filesystem::path& dir);
std::vector<FullSubject> load_full_subjects(const std::filesystem::path& dir);

} // namespace mseg
