#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "unet3p/arch.hpp"
#include "unet3p/config.hpp"
#include "unet3p/data.hpp"
#include "unet3p/gradcheck_suite.hpp"
#include "unet3p/layers.hpp"
#include "unet3p/losses.hpp"
#include "unet3p/tensor_io.hpp"
#include "unet3p/train.hpp"

namespace {

using namespace unet3p;

constexpr int kExitOk = 0;
constexpr int kExitVerification = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConsistency = 3;
constexpr int kExitNumeric = 4;

struct SeedOverrides {
    std::uint64_t arch_seed = 0, data_seed = 0, train_seed = 0;  // 0 = keep config value
};

RunConfig load_config(const std::string& path, const SeedOverrides& seeds) {
    RunConfig cfg = parse_config_file(path);
    if (seeds.arch_seed) cfg.arch_seed = seeds.arch_seed;
    if (seeds.data_seed) cfg.data_seed = seeds.data_seed;
    if (seeds.train_seed) {
        cfg.train_seed = seeds.train_seed;
        cfg.train.seed = seeds.train_seed;
    }
    cfg.validate();
    return cfg;
}

void require_writable_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    const std::string probe = dir + "/.write_probe";
    std::ofstream f(probe);
    if (!f) throw ConfigError("output directory is not writable: " + dir);
    f.close();
    fs::remove(probe, ec);
}

int cmd_paramcount(const std::string& config_path) {
    RunConfig cfg = load_config(config_path, {});
    std::vector<ParamReport> reports;
    for (Variant v : {Variant::unet, Variant::unetpp, Variant::unet3p}) {
        ArchSpec spec = cfg.arch;
        spec.variant = v;
        reports.push_back(param_report(spec));
    }
    std::fputs(render_param_table(reports).c_str(), stdout);
    std::fputs("\n", stdout);
    for (const auto& r : reports) std::fputs(render_param_kv(r).c_str(), stdout);
    for (const auto& r : reports) {
        if (!r.consistent()) {
            std::fprintf(stderr, "paramcount: symbolic and enumerated counts disagree for %s\n",
                         variant_name(r.spec.variant).c_str());
            return kExitConsistency;
        }
    }
    return kExitOk;
}

int cmd_gradcheck(const SuiteOptions& opt) {
    set_finite_check(true);
    auto items = run_gradcheck_suite(opt);
    std::fputs(render_suite(items).c_str(), stdout);
    if (!suite_passed(items)) {
        for (const auto& item : items) {
            if (!item.pass) {
                std::fprintf(stderr, "gradcheck: %s failed (worst rel err %.3e >= %.0e)\n",
                             item.name.c_str(), item.worst_rel_err, item.tolerance);
            }
        }
        return kExitVerification;
    }
    std::printf("gradcheck: all %zu items passed\n", items.size());
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const SeedOverrides& seeds) {
    RunConfig cfg = load_config(config_path, seeds);
    require_writable_dir(out_dir);

    {
        std::ofstream resolved(out_dir + "/config_resolved.cfg");
        resolved << render_config(cfg);
    }

    Network net = build(cfg.arch, cfg.arch_seed);
    auto data = generate_all(cfg.train_data_spec());
    TrainResult result = train(net, data, cfg.train, cfg.loss);

    std::ofstream log(out_dir + "/train_log.txt");
    if (!log) throw ConfigError("cannot write training log in " + out_dir);
    for (const auto& e : result.epochs) {
        const std::string line = format_epoch_line(e);
        log << line << "\n";
        std::printf("%s\n", line.c_str());
    }
    save_checkpoint(out_dir + "/checkpoint", net.checkpoint_tensors());
    if (net.spec.cgm) {
        std::printf("classifier train accuracy %.6f\n", result.final_cls_accuracy);
    }
    std::printf("checkpoint written to %s/checkpoint\n", out_dir.c_str());
    return kExitOk;
}

std::vector<Sample> dataset_for_split(const RunConfig& cfg, const std::string& split) {
    if (split == "train") return generate_all(cfg.train_data_spec());
    if (split == "eval") return generate_all(cfg.eval_data_spec());
    throw ConfigError("unknown split '" + split + "' (expected train|eval)");
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& split, bool no_gate, const SeedOverrides& seeds) {
    RunConfig cfg = load_config(config_path, seeds);
    Network net = build(cfg.arch, cfg.arch_seed);
    load_checkpoint(checkpoint, net.checkpoint_tensors());
    auto data = dataset_for_split(cfg, split);
    EvalResult r = evaluate(net, data, !no_gate);

    std::printf("samples %zu\n", data.size());
    std::printf("gate %s\n", r.gate_available && !no_gate ? "on" : "off");
    if (r.cls_accuracy >= 0.0) std::printf("cls_accuracy %.6f\n", r.cls_accuracy);
    std::printf("mean_dice_ungated %.6f\n", r.mean_dice_ungated);
    std::printf("mean_dice_gated %.6f\n", r.mean_dice_gated);
    std::printf("nonorgan_samples %d\n", r.nonorgan_samples);
    std::printf("fp_pixels_ungated %lld\n", static_cast<long long>(r.fp_pixels_ungated));
    std::printf("fp_pixels_gated %lld\n", static_cast<long long>(r.fp_pixels_gated));
    for (std::size_t i = 0; i < r.dice_ungated.size(); ++i) {
        std::printf("sample %zu dice %.6f gated %.6f\n", i, r.dice_ungated[i], r.dice_gated[i]);
    }
    return kExitOk;
}

int cmd_predict(const std::string& config_path, const std::string& checkpoint,
                const std::string& out_dir, const std::string& split, bool no_gate,
                const SeedOverrides& seeds) {
    RunConfig cfg = load_config(config_path, seeds);
    require_writable_dir(out_dir);
    Network net = build(cfg.arch, cfg.arch_seed);
    load_checkpoint(checkpoint, net.checkpoint_tensors());
    auto data = dataset_for_split(cfg, split);

    NoGradGuard no_grad;
    int idx = 0;
    for (const auto& sample : data) {
        auto x = Tensor::from_data({1, sample.image->dim(0), sample.image->dim(1),
                                    sample.image->dim(2)},
                                   sample.image->data);
        ForwardResult fwd = net.forward(x, Mode::eval, 0);
        TensorPtr prob = fwd.side_outputs[0];
        if (net.spec.cgm && !no_gate) {
            auto probs = sigmoid(fwd.cls_logits);
            prob = apply_cgm_gate({prob}, probs)[0];
        }
        char name[64];
        std::snprintf(name, sizeof(name), "%s/pred_%04d.pgm", out_dir.c_str(), idx);
        write_pgm_mask(name, *prob, 0.5);
        std::snprintf(name, sizeof(name), "%s/prob_%04d.tns", out_dir.c_str(), idx);
        write_tns(name, *prob);
        ++idx;
    }
    std::printf("wrote %d predictions to %s\n", idx, out_dir.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"UNet / UNet++ / UNet 3+ segmentation workbench"};
    app.require_subcommand(1);

    SeedOverrides seeds;
    std::string config_path, out_dir, checkpoint, split = "train";
    bool no_gate = false;
    SuiteOptions gopt;

    auto add_seed_flags = [&seeds](CLI::App* cmd) {
        cmd->add_option("--arch-seed", seeds.arch_seed, "override arch_seed");
        cmd->add_option("--data-seed", seeds.data_seed, "override data_seed");
        cmd->add_option("--train-seed", seeds.train_seed, "override train_seed");
    };

    auto* pc = app.add_subcommand("paramcount", "parameter accounting for all three variants");
    pc->add_option("--config", config_path, "config file")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification suite");
    gc->add_option("--seed", gopt.seed, "base seed");
    gc->add_option("--rounds", gopt.rounds, "random rounds per item");
    gc->add_flag("--inject-conv-bug", gopt.inject_conv_bug,
                 "self-test: corrupt conv2d's analytic gradient");

    auto* tr = app.add_subcommand("train", "train a network from a config");
    tr->add_option("--config", config_path, "config file")->required();
    tr->add_option("--out", out_dir, "output directory")->required();
    add_seed_flags(tr);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--config", config_path, "config file")->required();
    ev->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    ev->add_option("--split", split, "train|eval dataset");
    ev->add_flag("--no-gate", no_gate, "disable the CGM gate");
    add_seed_flags(ev);

    auto* pr = app.add_subcommand("predict", "write PGM masks and TNS1 probability maps");
    pr->add_option("--config", config_path, "config file")->required();
    pr->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    pr->add_option("--out", out_dir, "output directory")->required();
    pr->add_option("--split", split, "train|eval dataset");
    pr->add_flag("--no-gate", no_gate, "disable the CGM gate");
    add_seed_flags(pr);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (pc->parsed()) return cmd_paramcount(config_path);
        if (gc->parsed()) return cmd_gradcheck(gopt);
        if (tr->parsed()) return cmd_train(config_path, out_dir, seeds);
        if (ev->parsed()) return cmd_eval(config_path, checkpoint, split, no_gate, seeds);
        if (pr->parsed()) return cmd_predict(config_path, checkpoint, out_dir, split, no_gate, seeds);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitUsage;
    } catch (const GeometryError& e) {
        std::fprintf(stderr, "geometry error: %s\n", e.what());
        return kExitUsage;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kExitNumeric;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "consistency error: %s\n", e.what());
        return kExitConsistency;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "shape error: %s\n", e.what());
        return kExitConsistency;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConsistency;
    }
    return kExitUsage;
}
