#pragma once

#include "mseg/adam.hpp"
#include "mseg/data.hpp"
#include "mseg/models.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mseg {

struct TrainConfig {
    int patch_size = 32;
    double lr = 1e-3;
    double lambda_s = 0.5;
    double lambda_w = 0.5;
    int pretrain_epochs = 3;
    int joint_epochs = 200;
    /// 0 means one step per training subject.
    int steps_per_epoch = 0;
    std::uint64_t seed = 0;
    bool augment = true;
    double augment_magnitude = 2.0;
    /// Step-decay schedule, off unless lr_decay_every > 0.
    int lr_decay_every = 0;
    double lr_decay_gamma = 0.5;
    /// Trailing subjects held out for validation loss; 0 disables.
    int validation_subjects = 0;
    /// Stop after this many epochs without validation improvement; 0 disables.
    int early_stopping_patience = 0;
    /// Real wall-clock times in the log. Off by default so logs are
    /// byte-reproducible; wall_ms is then written as 0.
    bool log_wall_time = false;
    ArchConfig arch;

    void validate() const;
};

/// Keys mirror the field names; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const ArchConfig& a);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Voxel-mean categorical cross-entropy of the partial head.
template <typename Scalar>
Var<Scalar> loss_partial(Tape<Scalar>& tape, const Var<Scalar>& logits_w, const LabelVolume& target_w);

template <typename Scalar>
struct JointLoss {
    Var<Scalar> total;
    Var<Scalar> partial;
    Var<Scalar> full;
};

/// lambda_s * CE(full head) + lambda_w * CE(partial head).
template <typename Scalar>
JointLoss<Scalar> loss_joint(Tape<Scalar>& tape, const ForwardOutput<Scalar>& out, const LabelVolume& target_s,
                             const LabelVolume& target_w, double lambda_s, double lambda_w);

struct StepRecord {
    std::int64_t step = 0;
    std::string stage;
    double loss_total = 0.0;
    double loss_w = 0.0;
    /// NaN for stage-1 steps, which have no full-task head.
    double loss_s = 0.0;
    double wall_ms = 0.0;
};

struct TrainLog {
    std::vector<StepRecord> records;
    std::vector<double> validation_losses;

    /// Header: step,stage,loss_total,loss_w,loss_s,wall_ms
    std::string to_csv() const;
    void write_csv(const std::filesystem::path& path) const;
};

struct Checkpoint {
    Model<float> model;
    std::optional<AdamState<float>> adam;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Loads a checkpoint and audits it against an expected architecture,
/// naming the first offending tensor on mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig& expected, ModelKind kind);

struct PartialSubject {
    std::string id;
    Volume image; // already normalised
    LabelVolume partial;
};

struct FullSubject {
    std::string id;
    Volume image; // already normalised
    LabelVolume full;
    LabelMap map;
};

struct PretrainResult {
    Checkpoint checkpoint;
    TrainLog log;
};

struct JointResult {
    Checkpoint checkpoint;
    TransferManifest manifest;
    bool transferred = false;
    TrainLog log;
};

/// Stage 1: single-decoder network on partial labels, batch size 1.
PretrainResult pretrain(const std::vector<PartialSubject>& data, const TrainConfig& config);

/// Stage 2: dual-decoder network on full labels plus partial labels
/// extracted through each subject's map. Without `init` the network
/// trains from its fresh initialisation.
JointResult joint_train(const std::vector<FullSubject>& data, const std::optional<Checkpoint>& init,
                        const TrainConfig& config);

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace mseg
