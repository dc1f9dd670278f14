// dc2fusion command line: dataset generation, training, fusion inference,
// metric evaluation, and built-in verification.
//
// Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dc2fusion/dataset.hpp"
#include "dc2fusion/selfcheck.hpp"
#include "dc2fusion/train.hpp"

namespace {

using namespace dc2f;

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::vector<std::size_t> parse_size_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(static_cast<std::size_t>(std::stoull(tok)));
    return out;
}

void apply_config_kv(ModelConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "in_channels")
        cfg.in_channels = std::stoull(value);
    else if (key == "patch")
        cfg.patch = std::stoull(value);
    else if (key == "base_embed")
        cfg.base_embed = std::stoull(value);
    else if (key == "level_channels")
        cfg.level_channels = parse_size_list(value);
    else if (key == "heads_per_level")
        cfg.heads_per_level = parse_size_list(value);
    else if (key == "blocks_per_level")
        cfg.blocks_per_level = std::stoull(value);
    else if (key == "window") {
        auto v = parse_size_list(value);
        if (v.size() != 3) throw DataError("config: window needs three extents");
        cfg.window = {v[0], v[1], v[2]};
    } else if (key == "offset_kernel")
        cfg.offset_kernel = std::stoull(value);
    else
        throw DataError("config: unknown key '" + key + "'");
}

// flat key=value file mirroring the ModelConfig field names; --set overrides
ModelConfig build_model_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    ModelConfig cfg;
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw DataError("cannot open config file: " + config_path);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw DataError("config: malformed line '" + line + "'");
            apply_config_kv(cfg, line.substr(0, eq), line.substr(eq + 1));
        }
    }
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw DataError("--set expects key=value");
        apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

std::vector<TrainSample> load_split(const std::string& root, const std::string& split) {
    std::vector<TrainSample> samples;
    for (const auto& id : list_split_ids(root, split)) samples.push_back({id, load_pair(root, split, id)});
    if (samples.empty()) throw DataError("no samples in split '" + split + "' under " + root);
    return samples;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
    std::string s = "{";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
    return s + "}";
}

template <class T>
int run_train(const std::string& data, const std::string& out, std::size_t epochs, std::uint64_t seed,
              const ModelConfig& cfg, TrainRunConfig run) {
    run.epochs = epochs;
    run.seed = seed;
    run.out_checkpoint = out;
    if (run.log_path.empty()) run.log_path = out + ".loss.csv";

    std::printf("run config: window %s  heads %s  lr %g  batch 1  epochs %zu  seed %llu  precision f%zu\n",
                fmt_list({cfg.window[0], cfg.window[1], cfg.window[2]}).c_str(),
                fmt_list(cfg.heads_per_level).c_str(), run.lr, epochs,
                static_cast<unsigned long long>(seed), sizeof(T) * 8);
    std::printf("model: patch %zu  channels %s  blocks/level %zu  offset kernel %zu\n", cfg.patch,
                fmt_list(cfg.level_channels).c_str(), cfg.blocks_per_level, cfg.offset_kernel);

    FusionModel<T> model = [&] {
        if (run.resume) {
            std::printf("resuming from %s\n", out.c_str());
            return FusionModel<T>::load(out);
        }
        return FusionModel<T>(cfg, seed);
    }();
    std::printf("parameters: %zu\n", model.parameter_count());

    std::vector<TrainSample> samples = load_split(data, "train");
    std::printf("train split: %zu samples\n", samples.size());

    TrainResult res = train(model, samples, run, [](std::size_t epoch, double mean_total) {
        std::printf("epoch %zu  mean total loss %.6f\n", epoch, mean_total);
        std::fflush(stdout);
    });
    std::printf("done: %zu steps, checkpoint %s, log %s\n", res.steps_run, out.c_str(), run.log_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dc2fusion: 3D multimodal image fusion with deformable window cross-attention"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired-volume dataset");
    std::string gen_out;
    std::size_t gen_count = 20;
    std::uint32_t gen_size = 32;
    std::uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--count", gen_count, "number of volume pairs (>= 10)")->capture_default_str();
    gen->add_option("--size", gen_size, "cubic volume extent")->capture_default_str();
    gen->add_option("--seed", gen_seed, "generation seed")->capture_default_str();

    // train
    auto* tr = app.add_subcommand("train", "train the fusion model");
    std::string tr_data, tr_out, tr_config, tr_log, tr_precision = "f32";
    std::size_t tr_epochs = 10, tr_interval = 1;
    std::uint64_t tr_seed = 0;
    double tr_lr = 1e-4;
    bool tr_resume = false, tr_no_augment = false, tr_check_finite = false;
    std::vector<std::string> tr_sets;
    tr->add_option("--data", tr_data, "dataset root (from gen-data)")->required();
    tr->add_option("--out", tr_out, "output checkpoint path")->required();
    tr->add_option("--epochs", tr_epochs, "training epochs (>= 1)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    tr->add_option("--seed", tr_seed, "run seed (init, shuffling, augmentation)")->capture_default_str();
    tr->add_option("--config", tr_config, "model config file (key=value lines)");
    tr->add_option("--set", tr_sets, "override a config key, e.g. --set patch=2")->take_all();
    tr->add_option("--lr", tr_lr, "Adam learning rate")->capture_default_str();
    tr->add_option("--ckpt-interval", tr_interval, "epochs between checkpoints")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    tr->add_option("--log", tr_log, "loss CSV path (default: <out>.loss.csv)");
    tr->add_option("--precision", tr_precision, "f32 (training) or f64 (verification)")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    tr->add_flag("--resume", tr_resume, "resume from --out checkpoint and its .opt sidecar");
    tr->add_flag("--no-augment", tr_no_augment, "disable random rotation augmentation");
    tr->add_flag("--check-finite", tr_check_finite, "debug mode: verify every op output is finite");

    // fuse
    auto* fu = app.add_subcommand("fuse", "fuse one volume pair with a trained checkpoint");
    std::string fu_ckpt, fu_mri, fu_pet, fu_out;
    fu->add_option("--ckpt", fu_ckpt, "model checkpoint")->required();
    fu->add_option("--mri", fu_mri, "modality A volume (.vol3)")->required();
    fu->add_option("--pet", fu_pet, "modality B volume (.vol3)")->required();
    fu->add_option("--out", fu_out, "fused output volume (.vol3)")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "compute fusion quality metrics");
    std::string ev_fused, ev_mri, ev_pet, ev_out, ev_mode = "slice2d";
    long long ev_slice = -1;
    ev->add_option("--fused", ev_fused, "fused volume (.vol3)")->required();
    ev->add_option("--mri", ev_mri, "modality A volume (.vol3)")->required();
    ev->add_option("--pet", ev_pet, "modality B volume (.vol3)")->required();
    ev->add_option("--mode", ev_mode, "slice2d or volume3d")
        ->check(CLI::IsMember({"slice2d", "volume3d"}))
        ->capture_default_str();
    ev->add_option("--slice", ev_slice, "axial slice index (default: middle slice)")->capture_default_str();
    ev->add_option("--out", ev_out, "report CSV path")->required();

    // gradcheck / selftest
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks for every operator (64-bit)");
    auto* st = app.add_subcommand("selftest", "gradient checks plus the exact-invariant battery");
    bool fault = false;
    for (auto* cmd : {gc, st})
        cmd->add_flag("--inject-backward-fault", fault,
                      "test fixture: corrupt one backward rule; the suite must then fail");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kExitUsage;
    }

    try {
        if (*gen) {
            generate_dataset(gen_out, gen_count, gen_size, gen_seed);
            auto splits = make_splits(gen_count, gen_seed);
            std::printf("wrote %zu pairs under %s (train %zu / val %zu / test %zu)\n", gen_count, gen_out.c_str(),
                        splits.train.size(), splits.val.size(), splits.test.size());
            return 0;
        }

        if (*tr) {
            DebugFlags::check_finite = tr_check_finite;
            ModelConfig cfg = build_model_config(tr_config, tr_sets);
            TrainRunConfig run;
            run.checkpoint_interval = tr_interval;
            run.log_path = tr_log;
            run.lr = tr_lr;
            run.augment = !tr_no_augment;
            run.resume = tr_resume;
            if (tr_precision == "f64")
                return run_train<double>(tr_data, tr_out, tr_epochs, tr_seed, cfg, run);
            return run_train<float>(tr_data, tr_out, tr_epochs, tr_seed, cfg, run);
        }

        if (*fu) {
            FusionModel<float> model = FusionModel<float>::load(fu_ckpt);
            Volume mri = load_volume(fu_mri);
            Volume pet = load_volume(fu_pet);
            Tensor<float> fused = model.forward(volume_to_tensor<float>(mri), volume_to_tensor<float>(pet),
                                                {false, /*clamp_output=*/true});
            save_volume(fu_out, tensor_to_volume(fused));
            std::printf("fused %s + %s -> %s\n", fu_mri.c_str(), fu_pet.c_str(), fu_out.c_str());
            return 0;
        }

        if (*ev) {
            Volume fused = load_volume(ev_fused);
            Volume mri = load_volume(ev_mri);
            Volume pet = load_volume(ev_pet);
            const EvalMode mode = ev_mode == "slice2d" ? EvalMode::Slice2d : EvalMode::Volume3d;
            FusionReport r = evaluate_sample(fused, mri, pet, mode, ev_slice,
                                             std::filesystem::path(ev_fused).stem().string());
            std::ofstream os(ev_out);
            if (!os) throw DataError("cannot write report: " + ev_out);
            write_reports_csv(os, {r});
            std::printf("metric      vs_mri      vs_pet        mean\n");
            std::printf("psnr   %9.4f   %9.4f   %9.4f\n", r.psnr.vs_mri, r.psnr.vs_pet, r.psnr.mean);
            std::printf("ssim   %9.4f   %9.4f   %9.4f\n", r.ssim.vs_mri, r.ssim.vs_pet, r.ssim.mean);
            std::printf("nmi    %9.4f   %9.4f   %9.4f\n", r.nmi.vs_mri, r.nmi.vs_pet, r.nmi.mean);
            std::printf("fmi    %9.4f   %9.4f   %9.4f\n", r.fmi.vs_mri, r.fmi.vs_pet, r.fmi.mean);
            return 0;
        }

        if (*gc || *st) {
            DebugFlags::backward_fault = fault;
            DebugFlags::check_finite = true;
            bool ok = report_checks(run_gradient_checks(), "gradcheck");
            if (*st) ok = report_checks(run_invariant_checks(), "invariant") && ok;
            std::printf("%s\n", ok ? "ALL CHECKS PASSED" : "CHECKS FAILED");
            if (!ok) {
                std::fprintf(stderr, "numeric error: verification suite failed\n");
                return kExitNumeric;
            }
            return 0;
        }
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kExitNumeric;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    }
    return 0;
}
