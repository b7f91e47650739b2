#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unet3p/layers.hpp"
#include "unet3p/tensor.hpp"

namespace unet3p {

enum class Variant { unet, unetpp, unet3p };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);  // throws ConfigError

// Declarative architecture description. Encoder stage i (1-based) carries
// base_channels * 2^i channels; UNet 3+ decoder nodes aggregate
// skip_channels * depth channels.
struct ArchSpec {
    Variant variant = Variant::unet3p;
    int depth = 5;           // N, number of encoder stages
    int base_channels = 32;
    int skip_channels = 64;
    int kernel = 3;          // D_F, odd
    int input_channels = 3;
    bool deep_supervision = true;
    bool cgm = false;
    double dropout_rate = 0.5;  // CGM head dropout

    void validate() const;  // throws ConfigError

    std::int64_t stage_channels(int i) const {  // d(X_En^i), i in 1..depth
        return static_cast<std::int64_t>(base_channels) << i;
    }
    // d(X_De^i): aggregated width for unet3p below the bottleneck, mirrored
    // encoder width otherwise
    std::int64_t decoder_channels(int i) const;
    std::int64_t min_input_size() const { return std::int64_t{1} << (depth - 1); }
};

enum class BranchKind { pooled_encoder, same_scale_encoder, upsampled_decoder };

struct BranchInfo {
    BranchKind kind;
    int source_stage;
    std::int64_t factor;  // pool or upsample factor (1 for the direct branch)
};

struct DecoderNodeInfo {
    int stage;
    std::vector<BranchInfo> branches;
};

enum class ParamKind { conv_weight, conv_bias, bn_scale, bn_shift };
enum class Section { encoder, decoder, intermediate, head, cgm };

struct ParamEntry {
    std::string name;
    TensorPtr tensor;
    ParamKind kind;
    Section section;
    int stage;  // decoder stage / level; 0 for encoder-wide or cgm entries
};

struct ConvBNRelu {
    Conv2d conv;
    BatchNorm2d bn;
    TensorPtr forward(const TensorPtr& x, Mode mode) { return relu(bn.forward(conv(x), mode)); }
};

struct ForwardResult {
    std::vector<TensorPtr> side_outputs;  // full-resolution [B,1,H,W] probabilities
    TensorPtr cls_logits;                 // [B,2] pre-sigmoid, null without CGM
    TensorPtr deepest;                    // X_En^N feature map
};

class Network {
public:
    ArchSpec spec;

    struct EncoderStage {
        ConvBNRelu block1, block2;
    };
    std::vector<EncoderStage> encoder;  // index i-1 holds stage i

    // unet3p decoder node: one conv per incoming scale, then the aggregation
    struct FullScaleNode {
        int stage;
        std::vector<Conv2d> branch_convs;       // aligned with info.branches
        ConvBNRelu agg;
    };
    std::vector<FullScaleNode> full_scale_nodes;  // stages 1..N-1

    // unet / unetpp node: upsample+conv path, then two fuse convs
    struct FuseNode {
        int level, col;  // col: 1..N-level; col == N-level is X_De^level
        ConvBNRelu up, fuse1, fuse2;
    };
    std::vector<FuseNode> fuse_nodes;

    struct SideHead {
        int stage;
        Conv2d conv;  // to 1 channel, biased (no BN follows)
    };
    std::vector<SideHead> heads;

    struct CgmHead {
        double dropout_rate;
        Conv2d conv;  // 1x1 to 2 channels, biased
    };
    std::optional<CgmHead> cgm;

    std::vector<DecoderNodeInfo> decoder_info;  // unet3p wiring metadata

    const std::vector<ParamEntry>& params() const { return params_; }
    const std::vector<NamedTensor>& buffers() const { return buffers_; }

    // train-mode forward updates BN running statistics; dropout_seed feeds
    // the CGM dropout mask
    ForwardResult forward(const TensorPtr& x, Mode mode, std::uint64_t dropout_seed = 0);

    // dropout -> 1x1 conv -> global max pool, pre-sigmoid [B,2]
    TensorPtr cgm_logits(const TensorPtr& deepest, Mode mode, std::uint64_t dropout_seed);

    std::vector<NamedTensor> checkpoint_tensors() const;  // params then buffers

    // builder internals
    void register_param(std::string name, TensorPtr t, ParamKind kind, Section sec, int stage);
    void register_conv(const std::string& prefix, const Conv2d& c, Section sec, int stage);
    void register_bn(const std::string& prefix, const BatchNorm2d& bn, Section sec, int stage);

private:
    std::vector<ParamEntry> params_;
    std::vector<NamedTensor> buffers_;
};

enum class BuildInit { random, zeros };

Network build(const ArchSpec& spec, std::uint64_t arch_seed,
              BuildInit init = BuildInit::random);

// sigmoid of cgm_logits: [B,2] probabilities, index 0 = without organ
TensorPtr cgm_forward(Network& net, const TensorPtr& deepest, Mode mode,
                      std::uint64_t dropout_seed = 0);

// per-sample argmax gate (tie -> 1 = organ present); every side output of a
// gated-off sample is zeroed. Pure data transform, not recorded for autodiff.
std::vector<TensorPtr> apply_cgm_gate(const std::vector<TensorPtr>& side_outputs,
                                      const TensorPtr& cls_probs);
std::vector<int> cgm_gates(const TensorPtr& cls_probs);

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

// Closed-form stage counts next to counts enumerated from a built network.
// "symbolic" decoder entries are the per-stage decoder formulas evaluated
// with this spec's channel widths; enumeration walks real weight tensors.
struct ParamReport {
    ArchSpec spec;
    std::vector<std::int64_t> decoder_stage_symbolic;    // index i-1 = stage i, stage N = 0
    std::vector<std::int64_t> decoder_stage_enumerated;
    std::int64_t encoder_sym = 0, encoder_enum = 0;          // conv weights
    std::int64_t intermediate_sym = 0, intermediate_enum = 0;  // unetpp X_Me conv weights
    std::int64_t head_sym = 0, head_enum = 0;                // head conv weights
    std::int64_t cgm_sym = 0, cgm_enum = 0;                  // cgm conv weights
    std::int64_t bias_sym = 0, bias_enum = 0;                // all conv biases
    std::int64_t bn_sym = 0, bn_enum = 0;                    // all BN scale+shift

    std::int64_t decoder_weights_symbolic() const;
    std::int64_t decoder_weights_enumerated() const;
    std::int64_t total_symbolic() const;
    std::int64_t total_enumerated() const;
    bool consistent() const;
};

ParamReport param_report(const ArchSpec& spec);

std::string render_param_table(const std::vector<ParamReport>& reports);
std::string render_param_kv(const ParamReport& report);

}  // namespace unet3p
