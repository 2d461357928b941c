#include "uvmb/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "CLI11.hpp"
#include "uvmb/checkpoint.hpp"
#include "uvmb/config_json.hpp"
#include "uvmb/data.hpp"
#include "uvmb/errors.hpp"
#include "uvmb/parallel.hpp"
#include "uvmb/png_io.hpp"
#include "uvmb/scan.hpp"
#include "uvmb/train.hpp"
#include "uvmb/verify.hpp"

namespace fs = std::filesystem;

namespace uvmb::cli {

namespace {

struct RunSpec {
    ModelConfig model;
    TrainConfig train;
    std::string out = "run";
    std::string data;
    bool has_synth = false;
    int synth_n = 0, synth_h = 0, synth_w = 0;
};

RunSpec spec_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"model", "train", "out", "data", "synthetic"}, "config");
    RunSpec s;
    if (j.contains("model")) s.model = model_config_from_json(j["model"]);
    if (j.contains("train")) s.train = train_config_from_json(j["train"]);
    if (j.contains("out")) s.out = j["out"].get<std::string>();
    if (j.contains("data")) s.data = j["data"].get<std::string>();
    if (j.contains("synthetic")) {
        reject_unknown_keys(j["synthetic"], {"n", "H", "W"}, "config.synthetic");
        s.has_synth = true;
        s.synth_n = j["synthetic"].at("n").get<int>();
        s.synth_h = j["synthetic"].at("H").get<int>();
        s.synth_w = j["synthetic"].at("W").get<int>();
    }
    return s;
}

nlohmann::json spec_to_json(const RunSpec& s) {
    nlohmann::json j;
    j["model"] = model_config_to_json(s.model);
    j["train"] = train_config_to_json(s.train);
    j["out"] = s.out;
    if (!s.data.empty()) j["data"] = s.data;
    if (s.has_synth) j["synthetic"] = {{"n", s.synth_n}, {"H", s.synth_h}, {"W", s.synth_w}};
    return j;
}

RunSpec load_spec(const std::string& config_path) {
    if (config_path.empty()) return RunSpec{};
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file: " + config_path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config JSON: ") + e.what());
    }
    return spec_from_json(j);
}

void parse_synth(const std::string& s, RunSpec& spec) {
    int n = 0, h = 0, w = 0;
    if (std::sscanf(s.c_str(), "%d,%d,%d", &n, &h, &w) != 3 || n < 0 || h < 1 || w < 1)
        throw ConfigError("--synthetic expects n,H,W");
    spec.has_synth = true;
    spec.synth_n = n;
    spec.synth_h = h;
    spec.synth_w = w;
}

void write_resolved_config(const RunSpec& spec) {
    fs::create_directories(spec.out);
    std::ofstream out(spec.out + "/config.json");
    if (!out) throw IoError("cannot write resolved config in " + spec.out);
    out << spec_to_json(spec).dump(2) << "\n";
}

std::vector<SegSample> load_samples(const RunSpec& spec) {
    if (spec.has_synth) {
        if (spec.data.empty())
            return synth_dataset(spec.synth_n, spec.synth_h, spec.synth_w, spec.train.seed);
        throw ConfigError("give either a dataset path or --synthetic, not both");
    }
    if (spec.data.empty()) throw ConfigError("no dataset: set data path or --synthetic n,H,W");
    return load_dataset(spec.data);
}

// CLI options only override the JSON config when actually given.
int cmd_train(const std::string& config_path, const std::string& out, const std::string& data,
              const std::string& synth, int epochs, double lr, const std::string& loss,
              const std::string& mode, uint64_t seed, int threads, int batch, int warmup,
              double holdout, int no_augment, const CLI::App* sub) {
    RunSpec spec = load_spec(config_path);
    if (sub->count("--out")) spec.out = out;
    if (sub->count("--data")) spec.data = data;
    if (sub->count("--synthetic")) parse_synth(synth, spec);
    if (sub->count("--epochs")) spec.train.epochs = epochs;
    if (sub->count("--lr")) spec.train.base_lr = lr;
    if (sub->count("--loss")) spec.train.loss = loss_kind_from_name(loss);
    if (sub->count("--mode")) spec.model.position_mode = position_mode_from_name(mode);
    if (sub->count("--seed")) spec.train.seed = seed;
    if (sub->count("--threads")) spec.train.threads = threads;
    if (sub->count("--batch")) spec.train.batch_size = batch;
    if (sub->count("--warmup")) spec.train.warmup_epochs = warmup;
    if (sub->count("--holdout")) spec.train.holdout = holdout;
    if (no_augment) spec.train.augment = false;
    spec.model.validate();
    spec.train.validate();

    std::vector<SegSample> samples = load_samples(spec);
    if (spec.has_synth) save_dataset(spec.out + "/data", samples);
    write_resolved_config(spec);
    const TrainResult res = train_loop(spec.model, spec.train, samples, spec.out);
    std::printf("trained %d epochs; best IoU %.4f; checkpoint %s.{json,bin}\n",
                spec.train.epochs, res.best_iou, res.checkpoint_prefix.c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path, int threads) {
    set_num_threads(threads);
    SegModel<float> model = load_checkpoint(checkpoint);
    const std::vector<SegSample> samples = load_dataset(data_path);
    if (samples.empty()) throw ConfigError("empty dataset: " + data_path);
    const SegMetrics m = evaluate_model(model, samples).metrics();
    nlohmann::json j;
    j["iou"] = m.iou;
    j["acc"] = m.acc;
    j["oa"] = m.oa;
    std::printf("%s\n", j.dump().c_str());
    return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& image_path,
              const std::string& out_path, int threads) {
    set_num_threads(threads);
    SegModel<float> model = load_checkpoint(checkpoint);
    Tensor<float> image = image_from_png(image_path);
    const int64_t H = image.size(1), W = image.size(2);
    int64_t h32 = (H + 31) / 32 * 32, w32 = (W + 31) / 32 * 32;
    Tape<float> tape(false);
    Var<float> input = Var<float>::leaf(image.reshaped({1, 3, H, W}), false);
    if (h32 != H || w32 != W) {
        std::printf("note: input %lldx%lld resized up to %lldx%lld (divisible by 32)\n",
                    static_cast<long long>(H), static_cast<long long>(W),
                    static_cast<long long>(h32), static_cast<long long>(w32));
        input = ops::bilinear_resize(tape, input, h32, w32);
    }
    Var<float> logits = model.forward(tape, input);
    if (h32 != H || w32 != W) logits = ops::bilinear_resize(tape, logits, H, W);
    const Tensor<float>& lv = logits.value();
    Tensor<float> mask({H, W});
    for (int64_t t = 0; t < H * W; ++t)
        mask[t] = lv[H * W + t] > lv[t] ? 1.0f : 0.0f;  // class 1 vs class 0

    // Overlay: foreground tinted red at 50% alpha, background untouched.
    PngImage overlay;
    overlay.height = static_cast<int>(H);
    overlay.width = static_cast<int>(W);
    overlay.channels = 3;
    overlay.pixels.resize(static_cast<size_t>(H * W * 3));
    const float tint[3] = {1.0f, 0.0f, 0.0f};
    for (int64_t r = 0; r < H; ++r)
        for (int64_t c = 0; c < W; ++c)
            for (int ch = 0; ch < 3; ++ch) {
                const float v = image.at({ch, r, c});
                const float o = mask.at({r, c}) > 0.5f ? 0.5f * v + 0.5f * tint[ch] : v;
                overlay.at(static_cast<int>(r), static_cast<int>(c), ch) =
                    static_cast<uint8_t>(std::lround(std::clamp(o, 0.0f, 1.0f) * 255.0f));
            }
    write_png(out_path, overlay);
    std::string mask_path = out_path;
    const size_t dot = mask_path.rfind(".png");
    mask_path = (dot == std::string::npos ? mask_path : mask_path.substr(0, dot)) + "_mask.png";
    mask_to_png(mask_path, mask);
    std::printf("wrote %s and %s\n", out_path.c_str(), mask_path.c_str());
    return 0;
}

int cmd_verify(const std::string& suite, int threads) {
    set_num_threads(threads);
    std::vector<PropertyResult> results;
    if (suite == "grad")
        results = verify_grad();
    else if (suite == "scan")
        results = verify_scan();
    else if (suite == "zoh")
        results = verify_zoh();
    else if (suite == "deform")
        results = verify_deform();
    else if (suite == "all")
        results = verify_all();
    else
        throw ConfigError("unknown suite '" + suite + "' (grad|scan|zoh|deform|all)");
    return report_properties(results) ? 0 : 1;
}

int cmd_ablate(const std::string& config_path, const std::string& out, const std::string& data,
               const std::string& synth, int epochs, uint64_t seed, int threads,
               const CLI::App* sub) {
    RunSpec spec = load_spec(config_path);
    if (sub->count("--out")) spec.out = out;
    if (sub->count("--data")) spec.data = data;
    if (sub->count("--synthetic")) parse_synth(synth, spec);
    if (sub->count("--epochs")) spec.train.epochs = epochs;
    if (sub->count("--seed")) spec.train.seed = seed;
    if (sub->count("--threads")) spec.train.threads = threads;
    spec.train.validate();
    const std::vector<SegSample> samples = load_samples(spec);
    write_resolved_config(spec);

    struct Variant {
        const char* name;
        BlockSet set;
        PositionMode mode;
    };
    const Variant variants[] = {
        {"mssm_only", BlockSet::mssm_only, PositionMode::serial},
        {"sade_only", BlockSet::sade_only, PositionMode::serial},
        {"parallel", BlockSet::both, PositionMode::parallel},
        {"reverse", BlockSet::both, PositionMode::reverse},
        {"serial", BlockSet::both, PositionMode::serial},
    };
    std::string csv = "mode,params,final_iou\n";
    for (const Variant& v : variants) {
        ModelConfig mc = spec.model;
        mc.block_set = v.set;
        mc.position_mode = v.mode;
        const TrainResult res =
            train_loop(mc, spec.train, samples, spec.out + "/ablate_" + v.name);
        const CostReport cost = count_params_flops(
            mc, static_cast<int>(samples[0].image.size(1)),
            static_cast<int>(samples[0].image.size(2)));
        char line[160];
        std::snprintf(line, sizeof(line), "%s,%lld,%.6g\n", v.name,
                      static_cast<long long>(cost.params), res.history.back().iou);
        csv += line;
    }
    std::ofstream f(spec.out + "/ablation.csv", std::ios::binary);
    if (!f) throw IoError("cannot write ablation CSV in " + spec.out);
    f << csv;
    std::printf("%s", csv.c_str());
    return 0;
}

int cmd_scan_demo(int H, int W, const std::string& out_path) {
    std::string csv = "direction,position,grid_index\n";
    for (const auto& o : scan::all_scan_orders(H, W)) {
        const std::string name =
            std::string(scan::direction_name(o.direction)) + (o.backward ? "-backward" : "-forward");
        for (size_t k = 0; k < o.perm.size(); ++k)
            csv += name + "," + std::to_string(k) + "," + std::to_string(o.perm[k]) + "\n";
    }
    if (out_path.empty()) {
        std::printf("%s", csv.c_str());
    } else {
        std::ofstream f(out_path, std::ios::binary);
        if (!f) throw IoError("cannot write " + out_path);
        f << csv;
    }
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"directional state-space segmentation toolkit"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train a model");
    std::string t_config, t_out = "run", t_data, t_synth, t_loss = "dice", t_mode = "serial";
    int t_epochs = 100, t_threads = 0, t_batch = 4, t_warmup = 10, t_noaug = 0;
    double t_lr = 1e-3, t_holdout = 0.2;
    uint64_t t_seed = 42;
    train->add_option("--config", t_config, "JSON config file");
    train->add_option("--out", t_out, "output directory");
    train->add_option("--data", t_data, "dataset directory (PNG pairs)");
    train->add_option("--synthetic", t_synth, "generate synthetic data: n,H,W");
    train->add_option("--epochs", t_epochs, "total epochs");
    train->add_option("--lr", t_lr, "base learning rate");
    train->add_option("--loss", t_loss, "loss: ce|dice");
    train->add_option("--mode", t_mode, "position mode: serial|parallel|reverse");
    train->add_option("--seed", t_seed, "global seed");
    train->add_option("--threads", t_threads, "worker threads (0 = auto, 1 = bit-reproducible)");
    train->add_option("--batch", t_batch, "batch size");
    train->add_option("--warmup", t_warmup, "warmup epochs");
    train->add_option("--holdout", t_holdout, "validation fraction (0 = validate on train)");
    train->add_flag("--no-augment", t_noaug, "disable augmentation");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string e_ckpt, e_data;
    int e_threads = 0;
    eval->add_option("--checkpoint", e_ckpt, "checkpoint prefix or .json path")->required();
    eval->add_option("--data", e_data, "dataset directory")->required();
    eval->add_option("--threads", e_threads, "worker threads");

    // infer
    auto* infer = app.add_subcommand("infer", "segment one image and write an overlay");
    std::string i_ckpt, i_image, i_out = "overlay.png";
    int i_threads = 0;
    infer->add_option("--checkpoint", i_ckpt, "checkpoint prefix or .json path")->required();
    infer->add_option("--image", i_image, "input PNG")->required();
    infer->add_option("--out", i_out, "overlay PNG path");
    infer->add_option("--threads", i_threads, "worker threads");

    // verify
    auto* verify = app.add_subcommand("verify", "run property suites");
    std::string v_suite = "all";
    int v_threads = 0;
    verify->add_option("suite", v_suite, "grad|scan|zoh|deform|all");
    verify->add_option("--threads", v_threads, "worker threads");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "train arrangement variants and compare");
    std::string a_config, a_out = "ablate", a_data, a_synth;
    int a_epochs = 8, a_threads = 0;
    uint64_t a_seed = 42;
    ablate->add_option("--config", a_config, "JSON config file");
    ablate->add_option("--out", a_out, "output directory");
    ablate->add_option("--data", a_data, "dataset directory");
    ablate->add_option("--synthetic", a_synth, "generate synthetic data: n,H,W");
    ablate->add_option("--epochs", a_epochs, "epochs per variant");
    ablate->add_option("--seed", a_seed, "shared seed");
    ablate->add_option("--threads", a_threads, "worker threads");

    // scan-demo
    auto* demo = app.add_subcommand("scan-demo", "emit the 8 permutation tables as CSV");
    int d_h = 4, d_w = 4;
    std::string d_out;
    demo->add_option("--height", d_h, "grid height");
    demo->add_option("--width", d_w, "grid width");
    demo->add_option("--out", d_out, "CSV path (default stdout)");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train->parsed())
            return cmd_train(t_config, t_out, t_data, t_synth, t_epochs, t_lr, t_loss, t_mode,
                             t_seed, t_threads, t_batch, t_warmup, t_holdout, t_noaug, train);
        if (eval->parsed()) return cmd_eval(e_ckpt, e_data, e_threads);
        if (infer->parsed()) return cmd_infer(i_ckpt, i_image, i_out, i_threads);
        if (verify->parsed()) return cmd_verify(v_suite, v_threads);
        if (ablate->parsed())
            return cmd_ablate(a_config, a_out, a_data, a_synth, a_epochs, a_seed, a_threads,
                              ablate);
        if (demo->parsed()) return cmd_scan_demo(d_h, d_w, d_out);
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 4;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 2;
    }
    return 2;
}

}  // namespace uvmb::cli
