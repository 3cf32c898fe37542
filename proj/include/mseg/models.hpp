#pragma once

#include "mseg/autograd.hpp"
#include "mseg/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mseg {

struct ArchConfig {
    int base_channels = 8;
    /// Number of pooling levels between the input and the bottleneck.
    int depth = 3;
    int kernel_size = 3;
    int in_channels = 1;
    /// Partial task: 15 structures plus background at full scale.
    int num_partial_classes = 16;
    int num_full_classes = 7;

    void validate() const;
    /// Patch extents must be a multiple of this.
    int patch_multiple() const { return 1 << depth; }

    bool operator==(const ArchConfig&) const = default;
};

enum class ModelKind { unet, monet };

std::string to_string(ModelKind kind);

/// Parameter names are dot paths:
///
///     name   := group "." block "." ("weight" | "bias")
///     group  := "encoder" | "decoder" | "decoder_w" | "decoder_s"
///     block  := "level" N ".conv" M      (encoder or decoder)
///             | "level" N ".up"          (decoder only)
///             | "bottleneck.conv" M      (encoder only)
///             | "head"                   (decoder only)
///
/// "decoder" belongs to the single-decoder U-Net; the dual-decoder network
/// carries "decoder_w" (partial task) and "decoder_s" (full task).
bool is_valid_param_name(const std::string& name);

struct ParamSpec {
    std::string name;
    Shape shape;
    /// Incoming connections per output unit, used for He scaling.
    Index fan_in = 0;
};

/// Every parameter of the architecture, in canonical order.
std::vector<ParamSpec> parameter_layout(const ArchConfig& arch, ModelKind kind);

template <typename Scalar>
struct Model {
    ArchConfig arch;
    ModelKind kind = ModelKind::unet;
    ParameterSet<Scalar> params;

    bool has_full_head() const { return kind == ModelKind::monet; }
};

/// He-normal weights with LeakyReLU gain, zero biases; pure in (arch, seed).
template <typename Scalar>
Model<Scalar> build_unet(const ArchConfig& arch, std::uint64_t seed);

template <typename Scalar>
Model<Scalar> build_monet(const ArchConfig& arch, std::uint64_t seed);

/// Throws naming the first tensor whose name or shape disagrees with the
/// layout implied by (arch, kind).
template <typename Scalar>
void check_layout(const ArchConfig& arch, ModelKind kind, const ParameterSet<Scalar>& params);

template <typename Scalar>
struct ForwardOutput {
    Var<Scalar> logits_w;
    /// Null for the single-decoder network.
    Var<Scalar> logits_s;
};

/// patch is [in_channels, D, H, W] with every extent divisible by
/// 2^depth. Both decoders read the same encoder activations.
template <typename Scalar>
ForwardOutput<Scalar> forward(const Model<Scalar>& model, const Var<Scalar>& patch, Tape<Scalar>& tape);

struct TransferManifest {
    struct Copy {
        std::string from;
        std::string to;
    };
    std::vector<Copy> copied;
    /// Destination tensors left at their fresh initialization.
    std::vector<std::string> skipped;
};

/// Loads stage-1 weights into a dual-decoder model: encoder verbatim, the
/// stage-1 decoder into both decoders. The full-task classifier is skipped
/// when its class count differs from the partial one.
template <typename Scalar>
TransferManifest transfer_params(const Model<Scalar>& stage1, Model<Scalar>& monet);

} // namespace mseg
