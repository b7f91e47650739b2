#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "unet3p/arch.hpp"
#include "unet3p/losses.hpp"
#include "unet3p/tensor.hpp"

using namespace unet3p;

namespace {
struct GuardOn {
    GuardOn() { set_finite_check(true); }
} g_guard_on;

ArchSpec small_spec(Variant v, int depth, int base, int skip, bool ds = true, bool cgm = false) {
    ArchSpec s;
    s.variant = v;
    s.depth = depth;
    s.base_channels = base;
    s.skip_channels = skip;
    s.kernel = 3;
    s.input_channels = 3;
    s.deep_supervision = ds;
    s.cgm = cgm;
    return s;
}
}  // namespace

TEST_CASE("spec validation") {
    ArchSpec s = small_spec(Variant::unet3p, 4, 2, 4);
    CHECK_NOTHROW(s.validate());
    s.depth = 1;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec(Variant::unet, 3, 2, 4);
    s.kernel = 4;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec(Variant::unet, 3, 2, 4);
    s.dropout_rate = 1.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK_THROWS_AS(variant_from_name("resnet"), ConfigError);
}

TEST_CASE("unet3p decoder widths follow skip_channels * depth") {
    // paper-scale numbers: N=5, skip 64 -> every aggregation is 320 wide
    {
        ArchSpec s = small_spec(Variant::unet3p, 5, 32, 64);
        Network net = build(s, 1, BuildInit::zeros);
        const auto& node3 = net.full_scale_nodes[2];  // stage 3
        std::int64_t concat_width = 0;
        for (const auto& conv : node3.branch_convs) concat_width += conv.out_channels;
        CHECK(concat_width == 320);
        CHECK(node3.agg.conv.in_channels == 320);
        CHECK(node3.agg.conv.out_channels == 320);
    }
    // desk-scale: N=4, skip 8 -> width 32
    {
        ArchSpec s = small_spec(Variant::unet3p, 4, 4, 8);
        Network net = build(s, 1, BuildInit::zeros);
        CHECK(net.full_scale_nodes[0].agg.conv.out_channels == 32);
        CHECK(s.decoder_channels(1) == 32);
        CHECK(s.decoder_channels(4) == s.stage_channels(4));  // X_De^N is X_En^N
    }
}

TEST_CASE("Eq-1 wiring: i-1 pooled, 1 direct, N-i upsampled branches, factors of two") {
    for (int depth : {2, 3, 4, 5}) {
        ArchSpec s = small_spec(Variant::unet3p, depth, 1, 2);
        Network net = build(s, 1, BuildInit::zeros);
        REQUIRE(static_cast<int>(net.decoder_info.size()) == depth - 1);
        for (const auto& info : net.decoder_info) {
            const int i = info.stage;
            REQUIRE(static_cast<int>(info.branches.size()) == depth);
            int pooled = 0, direct = 0, upsampled = 0;
            std::set<int> sources;
            for (const auto& br : info.branches) {
                sources.insert(br.source_stage);
                switch (br.kind) {
                    case BranchKind::pooled_encoder:
                        ++pooled;
                        CHECK(br.source_stage < i);
                        CHECK(br.factor == (std::int64_t{1} << (i - br.source_stage)));
                        break;
                    case BranchKind::same_scale_encoder:
                        ++direct;
                        CHECK(br.source_stage == i);
                        break;
                    case BranchKind::upsampled_decoder:
                        ++upsampled;
                        CHECK(br.source_stage > i);
                        CHECK(br.factor == (std::int64_t{1} << (br.source_stage - i)));
                        break;
                }
            }
            CHECK(pooled == i - 1);
            CHECK(direct == 1);
            CHECK(upsampled == depth - i);
            CHECK(static_cast<int>(sources.size()) == depth);  // every scale exactly once
        }
    }
}

TEST_CASE("forward: N=4 on 32x32 yields 4 full-resolution side outputs") {
    ArchSpec s = small_spec(Variant::unet3p, 4, 2, 4);
    Network net = build(s, 7);
    auto x = Tensor::uniform({2, 3, 32, 32}, 3, 0.0, 1.0);
    auto out = net.forward(x, Mode::train, 0);
    REQUIRE(out.side_outputs.size() == 4);
    for (const auto& so : out.side_outputs) {
        CHECK(so->shape == std::vector<std::int64_t>{2, 1, 32, 32});
        for (double v : so->data) {
            CHECK(v > 0.0);  // sigmoid range, strictly
            CHECK(v < 1.0);
        }
    }
    CHECK(out.deepest->dim(1) == s.stage_channels(4));
}

TEST_CASE("forward shape contract holds for every variant") {
    for (Variant v : {Variant::unet, Variant::unetpp, Variant::unet3p}) {
        for (int depth : {2, 3, 4}) {
            ArchSpec s = small_spec(v, depth, 1, 2);
            Network net = build(s, 11);
            const std::int64_t size = 8 * s.min_input_size();
            auto x = Tensor::uniform({1, 3, size, size}, 5, 0.0, 1.0);
            auto out = net.forward(x, Mode::eval, 0);
            REQUIRE(static_cast<int>(out.side_outputs.size()) == depth);
            for (const auto& so : out.side_outputs) {
                CHECK(so->shape == std::vector<std::int64_t>({1, 1, size, size}));
            }
        }
    }
}

TEST_CASE("forward: all-zero parameters give sigmoid(0) = 0.5 everywhere") {
    ArchSpec s = small_spec(Variant::unet3p, 3, 1, 2);
    Network net = build(s, 0, BuildInit::zeros);
    auto x = Tensor::uniform({1, 3, 16, 16}, 9, 0.0, 1.0);
    auto out = net.forward(x, Mode::eval, 0);
    for (const auto& so : out.side_outputs) {
        for (double v : so->data) CHECK(v == 0.5);
    }
}

TEST_CASE("forward geometry and channel errors") {
    ArchSpec s = small_spec(Variant::unet3p, 4, 1, 2);
    Network net = build(s, 1, BuildInit::zeros);
    auto bad_dims = Tensor::zeros({1, 3, 20, 20});  // not divisible by 8
    CHECK_THROWS_AS(net.forward(bad_dims, Mode::eval, 0), GeometryError);
    auto bad_ch = Tensor::zeros({1, 2, 32, 32});
    CHECK_THROWS_AS(net.forward(bad_ch, Mode::eval, 0), ShapeError);
}

TEST_CASE("deep supervision flag controls side output count") {
    for (Variant v : {Variant::unet, Variant::unetpp, Variant::unet3p}) {
        ArchSpec ds_on = small_spec(v, 3, 1, 2, true);
        CHECK(build(ds_on, 1, BuildInit::zeros).heads.size() == 3);
        ArchSpec ds_off = small_spec(v, 3, 1, 2, false);
        Network net = build(ds_off, 1, BuildInit::zeros);
        REQUIRE(net.heads.size() == 1);
        CHECK(net.heads[0].stage == 1);
    }
}

TEST_CASE("cgm head: shapes, zero-parameter probabilities, eval determinism") {
    ArchSpec s = small_spec(Variant::unet3p, 3, 1, 2, true, true);
    Network net = build(s, 0, BuildInit::zeros);
    auto x = Tensor::uniform({3, 3, 16, 16}, 13, 0.0, 1.0);
    auto out = net.forward(x, Mode::eval, 0);
    REQUIRE(out.cls_logits);
    CHECK(out.cls_logits->shape == std::vector<std::int64_t>{3, 2});

    auto probs = cgm_forward(net, out.deepest, Mode::eval, 0);
    CHECK(probs->shape == std::vector<std::int64_t>{3, 2});
    for (double v : probs->data) CHECK(v == 0.5);  // zero conv -> (0.5, 0.5)

    // eval mode ignores the dropout seed
    auto p1 = cgm_forward(net, out.deepest, Mode::eval, 1);
    auto p2 = cgm_forward(net, out.deepest, Mode::eval, 2);
    CHECK(p1->data == p2->data);

    ArchSpec no_cgm = small_spec(Variant::unet3p, 3, 1, 2, true, false);
    Network plain = build(no_cgm, 1, BuildInit::zeros);
    CHECK_THROWS_AS(plain.cgm_logits(out.deepest, Mode::eval, 0), ContractError);
}

TEST_CASE("cgm gate: annihilation, identity, per-sample independence, tie") {
    auto so = Tensor::uniform({2, 1, 4, 4}, 17, 0.1, 0.9);

    auto off = Tensor::from_data({2, 2}, {0.8, 0.2, 0.8, 0.2});  // gate 0 for both
    auto gated_off = apply_cgm_gate({so}, off);
    for (double v : gated_off[0]->data) CHECK(v == 0.0);

    auto on = Tensor::from_data({2, 2}, {0.2, 0.8, 0.2, 0.8});
    auto gated_on = apply_cgm_gate({so}, on);
    CHECK(gated_on[0]->data == so->data);  // gate 1 is the identity, bit-exactly

    // mixed batch gates each sample independently
    auto mixed = Tensor::from_data({2, 2}, {0.8, 0.2, 0.2, 0.8});
    auto gated = apply_cgm_gate({so}, mixed)[0];
    for (std::int64_t i = 0; i < 16; ++i) CHECK(gated->data[static_cast<std::size_t>(i)] == 0.0);
    for (std::int64_t i = 16; i < 32; ++i) {
        CHECK(gated->data[static_cast<std::size_t>(i)] == so->data[static_cast<std::size_t>(i)]);
    }

    // exact tie resolves to gate 1
    auto tie = Tensor::from_data({1, 2}, {0.5, 0.5});
    CHECK(cgm_gates(tie) == std::vector<int>{1});
}

TEST_CASE("parameter oracle: symbolic equals enumerated on randomized specs") {
    Rng rng(2024);
    for (Variant v : {Variant::unet, Variant::unetpp, Variant::unet3p}) {
        for (int trial = 0; trial < 6; ++trial) {
            ArchSpec s;
            s.variant = v;
            s.depth = 2 + static_cast<int>(rng.uniform_int(4));
            s.base_channels = 1 + static_cast<int>(rng.uniform_int(6));
            s.skip_channels = 1 + static_cast<int>(rng.uniform_int(8));
            s.kernel = 1 + 2 * static_cast<int>(rng.uniform_int(3));
            s.input_channels = 1 + static_cast<int>(rng.uniform_int(3));
            s.deep_supervision = rng.uniform() < 0.5;
            s.cgm = rng.uniform() < 0.5;
            ParamReport rep = param_report(s);
            CAPTURE(variant_name(v));
            CAPTURE(s.depth);
            CHECK(rep.consistent());
            CHECK(rep.total_symbolic() == rep.total_enumerated());
            CHECK(rep.decoder_stage_symbolic == rep.decoder_stage_enumerated);
        }
    }
}

TEST_CASE("parameter registry is duplicate-free and enumerable") {
    ArchSpec s = small_spec(Variant::unetpp, 4, 2, 4, true, true);
    Network net = build(s, 1, BuildInit::zeros);
    std::set<std::string> names;
    for (const auto& p : net.params()) {
        CHECK(names.insert(p.name).second);  // unique
    }
    std::set<const Tensor*> tensors;
    for (const auto& p : net.params()) {
        CHECK(tensors.insert(p.tensor.get()).second);  // registered exactly once
    }
}

TEST_CASE("paper-scale ordering: unet3p < unet < unetpp decoder weights, smallest total") {
    std::vector<ParamReport> reps;
    for (Variant v : {Variant::unet, Variant::unetpp, Variant::unet3p}) {
        ArchSpec s = small_spec(v, 5, 32, 64);
        reps.push_back(param_report(s));
    }
    const auto& unet = reps[0];
    const auto& unetpp = reps[1];
    const auto& unet3p = reps[2];
    CHECK(unet3p.decoder_weights_symbolic() < unet.decoder_weights_symbolic());
    CHECK(unet.decoder_weights_symbolic() < unetpp.decoder_weights_symbolic());
    CHECK(unet3p.total_symbolic() < unet.total_symbolic());
    CHECK(unet3p.total_symbolic() < unetpp.total_symbolic());
}

TEST_CASE("per-stage inequality: unetpp decoder stage never below unet's") {
    Rng rng(5);
    for (int trial = 0; trial < 6; ++trial) {
        ArchSpec s;
        s.depth = 2 + static_cast<int>(rng.uniform_int(4));
        s.base_channels = 1 + static_cast<int>(rng.uniform_int(8));
        s.skip_channels = 1 + static_cast<int>(rng.uniform_int(8));
        s.kernel = 1 + 2 * static_cast<int>(rng.uniform_int(3));
        s.variant = Variant::unet;
        ParamReport u = param_report(s);
        s.variant = Variant::unetpp;
        ParamReport upp = param_report(s);
        for (std::size_t i = 0; i < u.decoder_stage_symbolic.size(); ++i) {
            CHECK(upp.decoder_stage_symbolic[i] >= u.decoder_stage_symbolic[i]);
        }
    }
}

TEST_CASE("fewer-parameters regime: skip*N < 2*base forces unet3p below both") {
    Rng rng(6);
    int tested = 0;
    while (tested < 5) {
        ArchSpec s;
        s.depth = 3 + static_cast<int>(rng.uniform_int(3));
        s.base_channels = 8 + static_cast<int>(rng.uniform_int(48));
        s.skip_channels = 1 + static_cast<int>(rng.uniform_int(4));
        if (static_cast<std::int64_t>(s.skip_channels) * s.depth >= 2 * s.base_channels) continue;
        ++tested;
        s.variant = Variant::unet3p;
        const auto r3 = param_report(s);
        s.variant = Variant::unet;
        const auto ru = param_report(s);
        s.variant = Variant::unetpp;
        const auto rpp = param_report(s);
        CHECK(r3.total_symbolic() < ru.total_symbolic());
        CHECK(r3.total_symbolic() < rpp.total_symbolic());
    }
}

TEST_CASE("gradient flow: one backward pass reaches every registered parameter") {
    LossConfig lcfg;
    for (Variant v : {Variant::unet, Variant::unetpp, Variant::unet3p}) {
        for (bool ds : {true, false}) {
            ArchSpec s = small_spec(v, 3, 1, 2, ds, false);
            Network net = build(s, 23);
            auto x = Tensor::uniform({1, 3, 16, 16}, 29, 0.0, 1.0);
            auto g = Tensor::uniform({1, 1, 16, 16}, 31, 0.0, 1.0);
            for (double& gv : g->data) gv = gv < 0.5 ? 0.0 : 1.0;
            auto out = net.forward(x, Mode::train, 0);
            backward(hybrid_loss(out.side_outputs, g, lcfg));
            for (const auto& p : net.params()) {
                CAPTURE(p.name);
                CHECK(p.tensor->grad_populated());
            }
        }
    }
}

TEST_CASE("unetpp grid: intermediate node count and concat widths follow the dense wiring") {
    ArchSpec s = small_spec(Variant::unetpp, 4, 2, 4);
    Network net = build(s, 1, BuildInit::zeros);
    // levels 1..3 carry 3,2,1 nodes
    CHECK(net.fuse_nodes.size() == 6);
    int intermediates = 0, decoders = 0;
    for (const auto& p : net.params()) {
        if (p.section == Section::intermediate) ++intermediates;
        if (p.section == Section::decoder) ++decoders;
    }
    CHECK(intermediates > 0);
    CHECK(decoders > 0);
    for (const auto& node : net.fuse_nodes) {
        const std::int64_t d = s.stage_channels(node.level);
        CHECK(node.fuse1.conv.in_channels == (node.col + 1) * d);
        CHECK(node.up.conv.in_channels == s.stage_channels(node.level + 1));
    }
}

TEST_CASE("param table and kv renders carry the oracle verdict") {
    ArchSpec s = small_spec(Variant::unet3p, 3, 2, 4);
    auto rep = param_report(s);
    const std::string kv = render_param_kv(rep);
    CHECK(kv.find("unet3p.total_symbolic=") != std::string::npos);
    CHECK(kv.find("unet3p.consistent=true") != std::string::npos);
    const std::string table = render_param_table({rep});
    CHECK(table.find("OK") != std::string::npos);
}
