#pragma once

#include "mseg/models.hpp"
#include "mseg/volume.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace mseg {

enum class Head { partial, full };

Head head_from_string(const std::string& s);
std::string to_string(Head h);

struct TileOptions {
    std::int64_t patch_size = 32;
    /// 0 selects patch_size / 2.
    std::int64_t stride = 0;
};

/// Averaged softmax over overlapping tiles, shape [C, D, H, W]. Tiles start
/// every `stride` voxels, with one extra tile flush against the far border
/// when the stride does not divide the extent.
Tensor<float> tile_probabilities(const Model<float>& model, const Volume& volume, Head head,
                                 const TileOptions& options = {});

/// Channel argmax of tile_probabilities; ties go to the lowest class id.
LabelVolume tile_infer(const Model<float>& model, const Volume& volume, Head head, const TileOptions& options = {});

LabelVolume argmax_labels(const Tensor<float>& prob, const Dims& dims);

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice(const LabelVolume& pred, const LabelVolume& truth, std::uint16_t structure);

struct DiceEntry {
    std::string subject;
    int structure = 0;
    double dice = 0.0;
};

enum class SpreadAxis { subjects, structures };

struct DiceReport {
    std::string task; // "full" or "partial"
    std::vector<DiceEntry> entries;
    std::vector<std::pair<std::string, double>> subject_means;
    double mean = 0.0;
    /// Population standard deviation.
    double std = 0.0;
    std::size_t n_subjects = 0;
    SpreadAxis axis = SpreadAxis::subjects;

    /// Header: subject,structure,dice
    std::string to_csv() const;
    nlohmann::json summary() const;
};

/// Per-subject structure means (background excluded), then mean and
/// population std across subjects, or across per-structure means when
/// axis == structures.
DiceReport aggregate(const std::vector<DiceEntry>& entries, const std::string& task,
                     SpreadAxis axis = SpreadAxis::subjects);

/// Dice for structures 1..max_structure of one subject.
std::vector<DiceEntry> evaluate_subject(const std::string& subject, const LabelVolume& pred, const LabelVolume& truth,
                                        int max_structure);

} // namespace mseg
