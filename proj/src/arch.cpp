#include "unet3p/arch.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace unet3p {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::unet: return "unet";
        case Variant::unetpp: return "unetpp";
        case Variant::unet3p: return "unet3p";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "unet") return Variant::unet;
    if (name == "unetpp") return Variant::unetpp;
    if (name == "unet3p") return Variant::unet3p;
    throw ConfigError("unknown variant '" + name + "' (expected unet|unetpp|unet3p)");
}

void ArchSpec::validate() const {
    if (depth < 2) throw ConfigError("depth must be >= 2");
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (skip_channels < 1) throw ConfigError("skip_channels must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel must be odd and >= 1");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must be in [0,1)");
}

std::int64_t ArchSpec::decoder_channels(int i) const {
    if (i == depth) return stage_channels(depth);  // X_De^N is X_En^N
    if (variant == Variant::unet3p) {
        return static_cast<std::int64_t>(skip_channels) * depth;
    }
    return stage_channels(i);  // mirrored decoder
}

// ---------------------------------------------------------------------------
// registration
// ---------------------------------------------------------------------------

void Network::register_param(std::string name, TensorPtr t, ParamKind kind, Section sec,
                             int stage) {
    params_.push_back(ParamEntry{std::move(name), std::move(t), kind, sec, stage});
}

void Network::register_conv(const std::string& prefix, const Conv2d& c, Section sec, int stage) {
    register_param(prefix + ".weight", c.weight, ParamKind::conv_weight, sec, stage);
    if (c.bias) register_param(prefix + ".bias", c.bias, ParamKind::conv_bias, sec, stage);
}

void Network::register_bn(const std::string& prefix, const BatchNorm2d& bn, Section sec,
                          int stage) {
    register_param(prefix + ".scale", bn.scale, ParamKind::bn_scale, sec, stage);
    register_param(prefix + ".shift", bn.shift, ParamKind::bn_shift, sec, stage);
    buffers_.push_back(NamedTensor{prefix + ".running_mean", bn.running_mean});
    buffers_.push_back(NamedTensor{prefix + ".running_var", bn.running_var});
}

std::vector<NamedTensor> Network::checkpoint_tensors() const {
    std::vector<NamedTensor> all;
    all.reserve(params_.size() + buffers_.size());
    for (const auto& p : params_) all.push_back(NamedTensor{p.name, p.tensor});
    for (const auto& b : buffers_) all.push_back(b);
    return all;
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

namespace {

ConvBNRelu make_conv_bn_relu(Network& net, const std::string& prefix, std::int64_t in_ch,
                             std::int64_t out_ch, int kernel, Rng* rng, Section sec, int stage) {
    ConvBNRelu blk;
    // conv feeding a BN carries no bias
    blk.conv = Conv2d::make(in_ch, out_ch, kernel, 1, Conv2d::same_padding(kernel), false, rng);
    blk.bn = BatchNorm2d::make(out_ch);
    net.register_conv(prefix, blk.conv, sec, stage);
    net.register_bn(prefix + ".bn", blk.bn, sec, stage);
    return blk;
}

std::string stage_name(const char* base, int i) {
    return std::string(base) + std::to_string(i);
}

}  // namespace

Network build(const ArchSpec& spec, std::uint64_t arch_seed, BuildInit init) {
    spec.validate();
    Network net;
    net.spec = spec;
    Rng rng_storage(arch_seed);
    Rng* rng = init == BuildInit::random ? &rng_storage : nullptr;
    const int N = spec.depth;
    const int K = spec.kernel;

    // shared encoder: per stage two (conv + BN + ReLU), factor-2 max pool between stages
    std::int64_t prev = spec.input_channels;
    for (int i = 1; i <= N; ++i) {
        const std::int64_t d = spec.stage_channels(i);
        Network::EncoderStage st;
        st.block1 = make_conv_bn_relu(net, stage_name("enc", i) + ".conv1", prev, d, K, rng,
                                      Section::encoder, i);
        st.block2 = make_conv_bn_relu(net, stage_name("enc", i) + ".conv2", d, d, K, rng,
                                      Section::encoder, i);
        net.encoder.push_back(std::move(st));
        prev = d;
    }

    if (spec.variant == Variant::unet3p) {
        const std::int64_t s = spec.skip_channels;
        const std::int64_t width = s * N;
        for (int i = 1; i <= N - 1; ++i) {
            Network::FullScaleNode node;
            node.stage = i;
            DecoderNodeInfo info;
            info.stage = i;
            for (int k = 1; k <= N; ++k) {
                BranchInfo br;
                std::int64_t src_ch;
                std::string name;
                if (k < i) {
                    br = BranchInfo{BranchKind::pooled_encoder, k, std::int64_t{1} << (i - k)};
                    src_ch = spec.stage_channels(k);
                    name = stage_name("dec", i) + ".from_enc" + std::to_string(k);
                } else if (k == i) {
                    br = BranchInfo{BranchKind::same_scale_encoder, k, 1};
                    src_ch = spec.stage_channels(k);
                    name = stage_name("dec", i) + ".from_enc" + std::to_string(k);
                } else {
                    br = BranchInfo{BranchKind::upsampled_decoder, k, std::int64_t{1} << (k - i)};
                    src_ch = spec.decoder_channels(k);
                    name = stage_name("dec", i) + ".from_dec" + std::to_string(k);
                }
                // branch conv is not BN-followed, so it carries a bias
                Conv2d c = Conv2d::make(src_ch, s, K, 1, Conv2d::same_padding(K), true, rng);
                net.register_conv(name, c, Section::decoder, i);
                node.branch_convs.push_back(std::move(c));
                info.branches.push_back(br);
            }
            node.agg = make_conv_bn_relu(net, stage_name("dec", i) + ".agg", width, width, K, rng,
                                         Section::decoder, i);
            net.full_scale_nodes.push_back(std::move(node));
            net.decoder_info.push_back(std::move(info));
        }
    } else {
        // unet: one fuse node per level; unetpp: dense grid, col N-level is X_De^level
        for (int i = 1; i <= N - 1; ++i) {
            const std::int64_t d = spec.stage_channels(i);
            const std::int64_t d_below = spec.stage_channels(i + 1);
            const int max_col = spec.variant == Variant::unet ? 1 : N - i;
            for (int j = 1; j <= max_col; ++j) {
                const bool is_decoder = (j == max_col) && (spec.variant == Variant::unet || j == N - i);
                const Section sec = is_decoder ? Section::decoder : Section::intermediate;
                std::string prefix = is_decoder ? stage_name("dec", i)
                                                : stage_name("me", i) + "_" + std::to_string(j);
                Network::FuseNode node;
                node.level = i;
                node.col = j;
                node.up = make_conv_bn_relu(net, prefix + ".up", d_below, d, K, rng, sec, i);
                // concat: j same-level inputs plus the upsampled one (unet: 1+1)
                const std::int64_t cat_ch = spec.variant == Variant::unet
                                                ? 2 * d
                                                : static_cast<std::int64_t>(j + 1) * d;
                node.fuse1 = make_conv_bn_relu(net, prefix + ".fuse1", cat_ch, d, K, rng, sec, i);
                node.fuse2 = make_conv_bn_relu(net, prefix + ".fuse2", d, d, K, rng, sec, i);
                net.fuse_nodes.push_back(std::move(node));
            }
        }
    }

    // side heads: conv to 1 channel, upsample to full resolution, sigmoid
    std::vector<int> head_stages;
    if (spec.deep_supervision) {
        for (int i = 1; i <= N; ++i) head_stages.push_back(i);
    } else {
        head_stages.push_back(1);
    }
    for (int i : head_stages) {
        Network::SideHead head;
        head.stage = i;
        head.conv = Conv2d::make(spec.decoder_channels(i), 1, K, 1, Conv2d::same_padding(K), true,
                                 rng);
        net.register_conv(stage_name("head", i), head.conv, Section::head, i);
        net.heads.push_back(std::move(head));
    }

    if (spec.cgm) {
        Network::CgmHead head;
        head.dropout_rate = spec.dropout_rate;
        head.conv = Conv2d::make(spec.stage_channels(N), 2, 1, 1, 0, true, rng);
        net.register_conv("cgm.conv", head.conv, Section::cgm, 0);
        net.cgm = std::move(head);
    }
    return net;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

// index of unet++ grid node (level i, col j) in build order
std::size_t fuse_index(int N, int i, int j) {
    std::size_t idx = 0;
    for (int l = 1; l < i; ++l) idx += static_cast<std::size_t>(N - l);
    return idx + static_cast<std::size_t>(j - 1);
}

}  // namespace

ForwardResult Network::forward(const TensorPtr& x, Mode mode, std::uint64_t dropout_seed) {
    if (x->rank() != 4) throw ShapeError("forward expects [B,C,H,W], got " + shape_str(x->shape));
    if (x->dim(1) != spec.input_channels) {
        throw ShapeError("forward: input has " + std::to_string(x->dim(1)) + " channels, spec says " +
                         std::to_string(spec.input_channels));
    }
    const std::int64_t H = x->dim(2), W = x->dim(3);
    const std::int64_t div = spec.min_input_size();
    if (H % div != 0 || W % div != 0) {
        throw GeometryError("forward: spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
                            " must be divisible by 2^(depth-1) = " + std::to_string(div));
    }
    const int N = spec.depth;

    std::vector<TensorPtr> enc(static_cast<std::size_t>(N) + 1);
    TensorPtr h = x;
    for (int i = 1; i <= N; ++i) {
        if (i > 1) h = maxpool(h, 2);
        h = encoder[static_cast<std::size_t>(i - 1)].block1.forward(h, mode);
        h = encoder[static_cast<std::size_t>(i - 1)].block2.forward(h, mode);
        enc[static_cast<std::size_t>(i)] = h;
    }

    std::vector<TensorPtr> dec(static_cast<std::size_t>(N) + 1);
    dec[static_cast<std::size_t>(N)] = enc[static_cast<std::size_t>(N)];

    if (spec.variant == Variant::unet3p) {
        for (int i = N - 1; i >= 1; --i) {
            auto& node = full_scale_nodes[static_cast<std::size_t>(i - 1)];
            const auto& info = decoder_info[static_cast<std::size_t>(i - 1)];
            std::vector<TensorPtr> branch_outs;
            branch_outs.reserve(info.branches.size());
            for (std::size_t bi = 0; bi < info.branches.size(); ++bi) {
                const BranchInfo& br = info.branches[bi];
                TensorPtr src;
                switch (br.kind) {
                    case BranchKind::pooled_encoder:
                        src = maxpool(enc[static_cast<std::size_t>(br.source_stage)], br.factor);
                        break;
                    case BranchKind::same_scale_encoder:
                        src = enc[static_cast<std::size_t>(br.source_stage)];
                        break;
                    case BranchKind::upsampled_decoder:
                        src = bilinear_upsample(dec[static_cast<std::size_t>(br.source_stage)],
                                                br.factor);
                        break;
                }
                branch_outs.push_back(node.branch_convs[bi](src));
            }
            dec[static_cast<std::size_t>(i)] = node.agg.forward(concat_channels(branch_outs), mode);
        }
    } else if (spec.variant == Variant::unet) {
        for (int i = N - 1; i >= 1; --i) {
            auto& node = fuse_nodes[static_cast<std::size_t>(i - 1)];
            auto u = node.up.forward(bilinear_upsample(dec[static_cast<std::size_t>(i + 1)], 2), mode);
            auto cat = concat_channels({enc[static_cast<std::size_t>(i)], u});
            dec[static_cast<std::size_t>(i)] =
                node.fuse2.forward(node.fuse1.forward(cat, mode), mode);
        }
    } else {  // unetpp dense grid
        std::vector<std::vector<TensorPtr>> grid(static_cast<std::size_t>(N) + 1);
        for (int i = 1; i <= N; ++i) {
            grid[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(N - i) + 1);
            grid[static_cast<std::size_t>(i)][0] = enc[static_cast<std::size_t>(i)];
        }
        for (int j = 1; j <= N - 1; ++j) {
            for (int i = 1; i <= N - j; ++i) {
                auto& node = fuse_nodes[fuse_index(N, i, j)];
                auto below = grid[static_cast<std::size_t>(i + 1)][static_cast<std::size_t>(j - 1)];
                auto u = node.up.forward(bilinear_upsample(below, 2), mode);
                std::vector<TensorPtr> cat_in;
                for (int jj = 0; jj < j; ++jj) {
                    cat_in.push_back(grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(jj)]);
                }
                cat_in.push_back(u);
                grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                    node.fuse2.forward(node.fuse1.forward(concat_channels(cat_in), mode), mode);
            }
        }
        for (int i = 1; i <= N - 1; ++i) {
            dec[static_cast<std::size_t>(i)] =
                grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(N - i)];
        }
    }

    ForwardResult result;
    result.deepest = enc[static_cast<std::size_t>(N)];
    for (auto& head : heads) {
        auto logits = head.conv(dec[static_cast<std::size_t>(head.stage)]);
        if (head.stage > 1) logits = bilinear_upsample(logits, std::int64_t{1} << (head.stage - 1));
        result.side_outputs.push_back(sigmoid(logits));
    }
    if (spec.cgm) {
        result.cls_logits = cgm_logits(result.deepest, mode, dropout_seed);
    }
    return result;
}

TensorPtr Network::cgm_logits(const TensorPtr& deepest, Mode mode, std::uint64_t dropout_seed) {
    if (!cgm) throw ContractError("cgm_logits: classification-guided module is disabled");
    auto h = dropout(deepest, cgm->dropout_rate, mode, dropout_seed);
    h = cgm->conv(h);
    return global_maxpool(h);  // [B,2]
}

TensorPtr cgm_forward(Network& net, const TensorPtr& deepest, Mode mode,
                      std::uint64_t dropout_seed) {
    return sigmoid(net.cgm_logits(deepest, mode, dropout_seed));
}

std::vector<int> cgm_gates(const TensorPtr& cls_probs) {
    if (cls_probs->rank() != 2 || cls_probs->dim(1) != 2) {
        throw ShapeError("cgm gate expects [B,2] probabilities, got " + shape_str(cls_probs->shape));
    }
    const std::int64_t B = cls_probs->dim(0);
    std::vector<int> gates(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
        const double without = cls_probs->data[static_cast<std::size_t>(2 * b)];
        const double with = cls_probs->data[static_cast<std::size_t>(2 * b + 1)];
        gates[static_cast<std::size_t>(b)] = with >= without ? 1 : 0;  // tie -> organ present
    }
    return gates;
}

std::vector<TensorPtr> apply_cgm_gate(const std::vector<TensorPtr>& side_outputs,
                                      const TensorPtr& cls_probs) {
    const std::vector<int> gates = cgm_gates(cls_probs);
    std::vector<TensorPtr> gated;
    gated.reserve(side_outputs.size());
    for (const auto& s : side_outputs) {
        if (s->rank() != 4 || s->dim(0) != static_cast<std::int64_t>(gates.size())) {
            throw ShapeError("apply_cgm_gate: side output " + shape_str(s->shape) +
                             " does not match batch of " + std::to_string(gates.size()));
        }
        auto out = Tensor::from_data(s->shape, s->data);
        const std::int64_t per = s->numel() / s->dim(0);
        for (std::int64_t b = 0; b < s->dim(0); ++b) {
            if (gates[static_cast<std::size_t>(b)] == 0) {
                std::fill(out->data.begin() + b * per, out->data.begin() + (b + 1) * per, 0.0);
            }
        }
        gated.push_back(std::move(out));
    }
    return gated;
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

std::int64_t ParamReport::decoder_weights_symbolic() const {
    std::int64_t t = intermediate_sym;
    for (std::int64_t v : decoder_stage_symbolic) t += v;
    return t;
}

std::int64_t ParamReport::decoder_weights_enumerated() const {
    std::int64_t t = intermediate_enum;
    for (std::int64_t v : decoder_stage_enumerated) t += v;
    return t;
}

std::int64_t ParamReport::total_symbolic() const {
    return encoder_sym + decoder_weights_symbolic() + head_sym + cgm_sym + bias_sym + bn_sym;
}

std::int64_t ParamReport::total_enumerated() const {
    return encoder_enum + decoder_weights_enumerated() + head_enum + cgm_enum + bias_enum + bn_enum;
}

bool ParamReport::consistent() const {
    return decoder_stage_symbolic == decoder_stage_enumerated && encoder_sym == encoder_enum &&
           intermediate_sym == intermediate_enum && head_sym == head_enum && cgm_sym == cgm_enum &&
           bias_sym == bias_enum && bn_sym == bn_enum;
}

ParamReport param_report(const ArchSpec& spec) {
    spec.validate();
    ParamReport rep;
    rep.spec = spec;
    const int N = spec.depth;
    const std::int64_t DF2 = static_cast<std::int64_t>(spec.kernel) * spec.kernel;
    const std::int64_t s = spec.skip_channels;

    // ---- symbolic side ----
    std::int64_t prev = spec.input_channels;
    for (int i = 1; i <= N; ++i) {
        const std::int64_t d = spec.stage_channels(i);
        rep.encoder_sym += DF2 * (prev * d + d * d);
        rep.bn_sym += 4 * d;  // two BNs per stage
        prev = d;
    }

    rep.decoder_stage_symbolic.assign(static_cast<std::size_t>(N), 0);
    for (int i = 1; i <= N - 1; ++i) {
        const std::int64_t d = spec.stage_channels(i);
        std::int64_t stage = 0;
        switch (spec.variant) {
            case Variant::unet:
                stage = DF2 * (spec.decoder_channels(i + 1) * d + d * d + 2 * d * d);
                rep.bn_sym += 6 * d;
                break;
            case Variant::unetpp:
                stage = DF2 * (spec.decoder_channels(i + 1) * d + d * d +
                               static_cast<std::int64_t>(N + 1 - i) * d * d);
                rep.bn_sym += 6 * d;  // the X_De node; intermediates added below
                break;
            case Variant::unet3p: {
                std::int64_t in_width = 0;
                for (int k = 1; k <= i; ++k) in_width += spec.stage_channels(k);
                for (int k = i + 1; k <= N; ++k) in_width += spec.decoder_channels(k);
                const std::int64_t width = s * N;
                stage = DF2 * (in_width * s + width * width);
                rep.bn_sym += 2 * width;
                rep.bias_sym += static_cast<std::int64_t>(N) * s;  // N biased branch convs
                break;
            }
        }
        rep.decoder_stage_symbolic[static_cast<std::size_t>(i - 1)] = stage;
    }

    if (spec.variant == Variant::unetpp) {
        for (int i = 1; i <= N - 2; ++i) {
            const std::int64_t d = spec.stage_channels(i);
            const std::int64_t d_below = spec.stage_channels(i + 1);
            for (int k = 1; k <= N - 1 - i; ++k) {
                rep.intermediate_sym +=
                    DF2 * (d_below * d + static_cast<std::int64_t>(k + 1) * d * d + d * d);
                rep.bn_sym += 6 * d;
            }
        }
    }

    const int head_count = spec.deep_supervision ? N : 1;
    for (int i = 1; i <= head_count; ++i) {
        const int stage = spec.deep_supervision ? i : 1;
        rep.head_sym += DF2 * spec.decoder_channels(stage);
        rep.bias_sym += 1;
    }
    if (spec.cgm) {
        rep.cgm_sym = 2 * spec.stage_channels(N);
        rep.bias_sym += 2;
    }

    // ---- enumerated side: walk a really-built network ----
    Network net = build(spec, 0, BuildInit::zeros);
    rep.decoder_stage_enumerated.assign(static_cast<std::size_t>(N), 0);
    for (const auto& p : net.params()) {
        const std::int64_t n = p.tensor->numel();
        switch (p.kind) {
            case ParamKind::conv_bias:
                rep.bias_enum += n;
                continue;
            case ParamKind::bn_scale:
            case ParamKind::bn_shift:
                rep.bn_enum += n;
                continue;
            case ParamKind::conv_weight:
                break;
        }
        switch (p.section) {
            case Section::encoder: rep.encoder_enum += n; break;
            case Section::decoder:
                rep.decoder_stage_enumerated[static_cast<std::size_t>(p.stage - 1)] += n;
                break;
            case Section::intermediate: rep.intermediate_enum += n; break;
            case Section::head: rep.head_enum += n; break;
            case Section::cgm: rep.cgm_enum += n; break;
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

std::string render_param_kv(const ParamReport& r) {
    std::ostringstream os;
    const std::string v = variant_name(r.spec.variant);
    for (std::size_t i = 0; i < r.decoder_stage_symbolic.size(); ++i) {
        os << v << ".decoder_stage" << (i + 1) << ".symbolic=" << r.decoder_stage_symbolic[i] << "\n";
        os << v << ".decoder_stage" << (i + 1) << ".enumerated=" << r.decoder_stage_enumerated[i]
           << "\n";
    }
    os << v << ".encoder_weights=" << r.encoder_sym << "\n";
    os << v << ".intermediate_weights=" << r.intermediate_sym << "\n";
    os << v << ".head_weights=" << r.head_sym << "\n";
    os << v << ".cgm_weights=" << r.cgm_sym << "\n";
    os << v << ".conv_biases=" << r.bias_sym << "\n";
    os << v << ".bn_affine=" << r.bn_sym << "\n";
    os << v << ".decoder_weights=" << r.decoder_weights_symbolic() << "\n";
    os << v << ".total_symbolic=" << r.total_symbolic() << "\n";
    os << v << ".total_enumerated=" << r.total_enumerated() << "\n";
    os << v << ".consistent=" << (r.consistent() ? "true" : "false") << "\n";
    return os.str();
}

std::string render_param_table(const std::vector<ParamReport>& reports) {
    if (reports.empty()) return "";
    const int N = reports[0].spec.depth;
    std::ostringstream os;
    const auto& s0 = reports[0].spec;
    os << "parameter report  (depth=" << N << " base=" << s0.base_channels
       << " skip=" << s0.skip_channels << " kernel=" << s0.kernel << " in=" << s0.input_channels
       << " ds=" << (s0.deep_supervision ? "on" : "off") << " cgm=" << (s0.cgm ? "on" : "off")
       << ")\n\n";

    auto row = [&os, &reports](const std::string& label,
                               const std::function<std::int64_t(const ParamReport&)>& get) {
        os << "  ";
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%-22s", label.c_str());
        os << buf;
        for (const auto& r : reports) {
            std::snprintf(buf, sizeof(buf), "%14lld", static_cast<long long>(get(r)));
            os << buf;
        }
        os << "\n";
    };

    os << "  " << std::string(22, ' ');
    for (const auto& r : reports) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%14s", variant_name(r.spec.variant).c_str());
        os << buf;
    }
    os << "\n";
    row("encoder weights", [](const ParamReport& r) { return r.encoder_sym; });
    for (int i = 1; i <= N - 1; ++i) {
        row("decoder stage " + std::to_string(i), [i](const ParamReport& r) {
            return r.decoder_stage_symbolic[static_cast<std::size_t>(i - 1)];
        });
    }
    row("intermediate nodes", [](const ParamReport& r) { return r.intermediate_sym; });
    row("head weights", [](const ParamReport& r) { return r.head_sym; });
    row("cgm weights", [](const ParamReport& r) { return r.cgm_sym; });
    row("conv biases", [](const ParamReport& r) { return r.bias_sym; });
    row("bn scale/shift", [](const ParamReport& r) { return r.bn_sym; });
    row("decoder weights", [](const ParamReport& r) { return r.decoder_weights_symbolic(); });
    row("total (symbolic)", [](const ParamReport& r) { return r.total_symbolic(); });
    row("total (enumerated)", [](const ParamReport& r) { return r.total_enumerated(); });
    os << "  " << std::string(22, ' ');
    for (const auto& r : reports) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%14s", r.consistent() ? "OK" : "MISMATCH");
        os << buf;
    }
    os << "\n";
    return os.str();
}

}  // namespace unet3p
