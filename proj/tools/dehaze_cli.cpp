// Command-line front end: dataset synthesis, training, evaluation, single-
// image inference, gradient verification, and plain-text plot data.

#include <CLI11.hpp>
#include <iostream>
#include <map>

#include "dehaze/config.hpp"
#include "dehaze/gradsuite.hpp"
#include "dehaze/train.hpp"

namespace {

using Precision = float;

struct CommonOptions {
    std::string config_path;
    dehaze::ModelConfig model = dehaze::ModelConfig::tiny();
    dehaze::TrainConfig train;
    dehaze::DatasetConfig dataset;
    std::string preset = "tiny";

    void resolve() {
        if (preset == "tiny") model = dehaze::ModelConfig::tiny();
        else if (preset == "full") model = dehaze::ModelConfig::full_scale();
        else throw dehaze::ParamError("unknown preset '" + preset + "'");
        dehaze::ConfigFile cfg;
        if (!config_path.empty()) cfg = dehaze::ConfigFile::load(config_path);
        cfg.apply_env(dehaze::known_config_keys());
        dehaze::apply_model_config(cfg, model);
        dehaze::apply_train_config(cfg, train);
        dehaze::apply_dataset_config(cfg, dataset);
    }
};

int run_synth(CommonOptions& opts) {
    const dehaze::Manifest m = dehaze::make_dataset<Precision>(opts.dataset);
    std::cout << "wrote " << m.entries.size() << " pairs to " << opts.dataset.out_dir
              << " (" << m.errors.size() << " input errors)\n";
    for (const auto& e : m.errors) std::cerr << "warning: " << e << "\n";
    return 0;
}

int run_train(CommonOptions& opts, const std::string& manifest_path,
              const std::string& checkpoint_path, const std::string& loss_log_path,
              const std::string& resume_path) {
    const auto manifest = dehaze::Manifest::load(manifest_path);
    const auto pairs = dehaze::load_pairs<Precision>(manifest, "train");
    dehaze::MoEMambaNet<Precision> net;
    dehaze::TrainState<Precision> resume_state;
    const dehaze::TrainState<Precision>* resume = nullptr;
    if (!resume_path.empty()) {
        net = dehaze::load_checkpoint<Precision>(resume_path, &resume_state);
        resume = &resume_state;
    } else {
        net = dehaze::build<Precision>(opts.model, opts.train.seed);
    }
    std::ofstream log_file;
    std::ostream* log = &std::cout;
    if (!loss_log_path.empty()) {
        log_file.open(loss_log_path);
        if (!log_file)
            throw dehaze::ParamError("cannot write loss log " + loss_log_path);
        log = &log_file;
    }
    const auto result =
        dehaze::train(net, pairs, opts.train, log, checkpoint_path, resume);
    std::cout << "trained to step " << result.last_step << "; final loss "
              << (result.losses.empty() ? 0.0 : result.losses.back()) << "\n";
    return 0;
}

int run_eval(CommonOptions& opts, const std::string& manifest_path,
             const std::string& checkpoint_path, const std::string& split,
             const std::string& report_path) {
    const auto manifest = dehaze::Manifest::load(manifest_path);
    const auto pairs = dehaze::load_pairs<Precision>(manifest, split);
    auto net = dehaze::load_checkpoint<Precision>(checkpoint_path);
    dehaze::MetricReport baseline;
    const auto report =
        dehaze::evaluate(net, pairs, opts.train.prior_window, &baseline);
    if (!report_path.empty()) report.write_file(report_path);
    std::cout << "# model output vs clean\n";
    report.write(std::cout);
    std::cout << "# raw hazy input vs clean (no-op baseline)\n";
    baseline.write(std::cout);
    return 0;
}

int run_infer(CommonOptions& opts, const std::string& checkpoint_path,
              const std::string& in_path, const std::string& out_path) {
    auto net = dehaze::load_checkpoint<Precision>(checkpoint_path);
    const auto hazy = dehaze::to_tensor<Precision>(dehaze::read_image(in_path));
    const auto levels = dehaze::rating_set_for(net.config);
    const auto prior =
        dehaze::estimate_prior(hazy, levels, opts.train.prior_window);
    const auto out = dehaze::infer_padded(net, hazy, prior);
    dehaze::write_image(out_path, dehaze::from_tensor(out));
    std::cout << "wrote " << out_path << " (" << out.dim(3) << "x" << out.dim(2)
              << ")\n";
    return 0;
}

int run_grad_check() {
    auto results = dehaze::primitive_grad_suite();
    results.push_back(dehaze::model_grad_check());
    int failures = 0;
    for (const auto& r : results) {
        std::cout << (r.ok() ? "PASS " : "FAIL ") << r.name << ": max relative error "
                  << r.max_rel << " (tolerance " << r.tolerance << ")\n";
        if (!r.ok()) ++failures;
    }
    if (failures) std::cerr << failures << " gradient check(s) out of tolerance\n";
    return failures ? 1 : 0;
}

int run_plot_data(CommonOptions& opts, const std::string& loss_log_path,
                  const std::string& manifest_path,
                  const std::string& checkpoint_path) {
    if (loss_log_path.empty() && (manifest_path.empty() || checkpoint_path.empty()))
        throw dehaze::ParamError(
            "plot-data: pass --loss-log and/or both --manifest and --checkpoint");
    if (!loss_log_path.empty()) {
        std::ifstream in(loss_log_path);
        if (!in) throw dehaze::ParamError("cannot open loss log " + loss_log_path);
        std::cout << "# loss curve: step lr loss\n";
        std::string line;
        while (std::getline(in, line)) {
            for (char& c : line)
                if (c == ',') c = ' ';
            std::cout << line << "\n";
        }
    }
    if (!manifest_path.empty() && !checkpoint_path.empty()) {
        const auto manifest = dehaze::Manifest::load(manifest_path);
        auto net = dehaze::load_checkpoint<Precision>(checkpoint_path);
        const auto levels = dehaze::rating_set_for(net.config);
        std::map<double, std::pair<double, std::int64_t>> by_beta;  // sum, count
        for (const auto& e : manifest.entries) {
            const auto hazy = dehaze::to_tensor<Precision>(dehaze::read_image(e.hazy_path));
            const auto clean =
                dehaze::to_tensor<Precision>(dehaze::read_image(e.clean_path));
            const auto prior =
                dehaze::estimate_prior(hazy, levels, opts.train.prior_window);
            const auto out = dehaze::infer_padded(net, hazy, prior);
            auto& acc = by_beta[e.beta];
            acc.first += dehaze::psnr(out, clean);
            acc.second += 1;
        }
        std::cout << "# psnr by haze intensity: beta mean_psnr\n";
        std::cout << std::setprecision(9);
        for (const auto& [beta, acc] : by_beta)
            std::cout << beta << " " << acc.first / static_cast<double>(acc.second)
                      << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Intensity-aware single-image dehazing toolkit"};
    app.require_subcommand(1);
    CommonOptions opts;
    app.add_option("--config", opts.config_path, "Plain-text configuration file")
        ->expected(1);

    auto add_preset = [&opts](CLI::App* cmd) {
        cmd->add_option("--preset", opts.preset,
                        "Model preset: tiny or full (default tiny)");
    };

    // Flag values land in these locals; after the config file resolves they
    // overlay it (flags beat the file, the file beats defaults).
    std::string synth_out, synth_input_dir, depth_kind;
    std::int64_t synth_scenes = -1, synth_size = -1, synth_betas = -1;
    std::int64_t synth_seed = -1;
    auto* synth = app.add_subcommand("synth", "Generate a paired hazy/clean dataset");
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--input-dir", synth_input_dir,
                      "Clean image directory (omit for procedural scenes)");
    synth->add_option("--scenes", synth_scenes, "Procedural scene count");
    synth->add_option("--size", synth_size, "Procedural scene side length");
    synth->add_option("--betas", synth_betas, "Intensity steps per scene");
    synth->add_option("--seed", synth_seed, "Dataset RNG seed");
    synth->add_option("--depth", depth_kind,
                      "Depth map kind: linear-ramp, radial, from-file");

    std::string manifest_path, checkpoint_path, loss_log_path, resume_path;
    std::int64_t train_iters = -1, train_batch = -1, train_crop = -1;
    std::int64_t train_seed = -1;
    double train_lr_start = -1, train_lr_end = -1;
    auto* train = app.add_subcommand("train", "Train a model on a dataset manifest");
    train->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    train->add_option("--checkpoint", checkpoint_path, "Checkpoint output path");
    train->add_option("--loss-log", loss_log_path, "Loss log output path");
    train->add_option("--resume", resume_path, "Checkpoint to resume from");
    train->add_option("--iters", train_iters, "Total optimizer steps");
    train->add_option("--batch", train_batch, "Batch size");
    train->add_option("--crop", train_crop, "Training crop size");
    train->add_option("--lr-start", train_lr_start, "Initial learning rate");
    train->add_option("--lr-end", train_lr_end, "Final learning rate");
    train->add_option("--seed", train_seed, "Training RNG seed");
    bool deterministic = false;
    train->add_flag("--deterministic", deterministic,
                    "Single-threaded fixed-order execution (always on; accepted "
                    "for compatibility)");
    add_preset(train);

    std::string split = "test", report_path;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    eval->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    eval->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
    eval->add_option("--split", split, "Manifest split (train or test)");
    eval->add_option("--report", report_path, "Write the metric report here");

    std::string in_path, out_path;
    auto* infer = app.add_subcommand("infer", "Dehaze a single image");
    infer->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
    infer->add_option("--in", in_path, "Hazy input image (PNG or PPM)")->required();
    infer->add_option("--out", out_path, "Dehazed output image")->required();

    app.add_subcommand("grad-check",
                       "Verify analytic gradients against finite differences");

    auto* plot = app.add_subcommand(
        "plot-data", "Emit loss-curve and per-intensity PSNR columns");
    plot->add_option("--loss-log", loss_log_path, "Loss log to columnize");
    plot->add_option("--manifest", manifest_path, "Dataset manifest");
    plot->add_option("--checkpoint", checkpoint_path, "Model checkpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        opts.resolve();
        if (!synth_out.empty()) opts.dataset.out_dir = synth_out;
        if (!synth_input_dir.empty()) opts.dataset.input_dir = synth_input_dir;
        if (synth_scenes >= 0) opts.dataset.scenes = synth_scenes;
        if (synth_size >= 0) opts.dataset.size = synth_size;
        if (synth_betas >= 0) opts.dataset.num_betas = synth_betas;
        if (synth_seed >= 0)
            opts.dataset.seed = static_cast<std::uint64_t>(synth_seed);
        if (train_iters >= 0) opts.train.total_iters = train_iters;
        if (train_batch >= 0) opts.train.batch_size = train_batch;
        if (train_crop >= 0) opts.train.crop = train_crop;
        if (train_lr_start > 0) opts.train.lr_start = train_lr_start;
        if (train_lr_end > 0) opts.train.lr_end = train_lr_end;
        if (train_seed >= 0) opts.train.seed = static_cast<std::uint64_t>(train_seed);
        if (!depth_kind.empty()) {
            if (depth_kind == "linear-ramp")
                opts.dataset.depth_kind = dehaze::DepthKind::LinearRamp;
            else if (depth_kind == "radial")
                opts.dataset.depth_kind = dehaze::DepthKind::Radial;
            else if (depth_kind == "from-file")
                opts.dataset.depth_kind = dehaze::DepthKind::FromFile;
            else
                throw dehaze::ParamError("unknown depth kind '" + depth_kind + "'");
        }
        if (app.got_subcommand(synth)) return run_synth(opts);
        if (app.got_subcommand(train))
            return run_train(opts, manifest_path, checkpoint_path, loss_log_path,
                             resume_path);
        if (app.got_subcommand(eval))
            return run_eval(opts, manifest_path, checkpoint_path, split, report_path);
        if (app.got_subcommand(infer))
            return run_infer(opts, checkpoint_path, in_path, out_path);
        if (app.got_subcommand("grad-check")) return run_grad_check();
        if (app.got_subcommand(plot))
            return run_plot_data(opts, loss_log_path, manifest_path, checkpoint_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
