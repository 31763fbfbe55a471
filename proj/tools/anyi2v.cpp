// anyi2v command line: invert, generate, inspect-taps, report.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "anyi2v/pipeline.hpp"

namespace {

using namespace anyi2v;

constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

// Every flag of every subcommand lands here before being applied to a RunConfig.
struct Flags {
    std::string image;
    std::string out = "out";
    std::string modality = "other";
    std::optional<std::string> traj;
    std::optional<std::string> embedding;
    std::uint64_t seed_embedding = 0;
    std::optional<std::string> checkpoint;
    std::optional<std::string> save_checkpoint;

    std::uint64_t seed = 0;
    int frames = 4;
    int size = 16;
    bool no_temporal = false;

    int t_alpha = 201;
    int steps = 25;
    int inversion_steps = 1000;
    int opt_every = 5;
    int opt_threshold = 20;
    int inner_iters = 5;
    double lr = 0.01;
    bool dump_latents = false;

    bool no_inject = false;
    bool no_debias = false;
    bool no_kv_propagate = false;
    std::size_t patch_size = 4;
    std::optional<std::string> inject_sites;

    std::optional<int> pca_dim;
    bool static_mask = false;
    bool no_mask = false;
    std::optional<std::string> opt_target;
    std::string opt_feature = "query";
    bool freeze_pca_basis = false;
    bool no_optimize = false;
};

void add_backbone_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("--seed", f.seed, "root seed for weights and noise");
    cmd->add_option("--frames", f.frames, "number of video frames")->check(CLI::PositiveNumber);
    cmd->add_option("--size", f.size, "latent grid size (square)")->check(CLI::PositiveNumber);
    cmd->add_flag("--no-temporal", f.no_temporal, "disable temporal attention");
    cmd->add_option("--checkpoint", f.checkpoint, "load backbone weights from a checkpoint directory");
    cmd->add_option("--save-checkpoint", f.save_checkpoint, "write the backbone used by this run as a checkpoint");
}

void add_input_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("image", f.image, "condition image (binary P5/P6)")->required();
    cmd->add_option("-o,--out", f.out, "output directory");
    cmd->add_option("--modality", f.modality, "condition modality tag (canny, depth, skeleton, ...)");
    cmd->add_option("--embedding", f.embedding, "prompt embedding as RTD1 [tokens, dim]");
    cmd->add_option("--seed-embedding", f.seed_embedding, "seed of the pseudo prompt embedding");
    cmd->add_option("--t-alpha", f.t_alpha, "feature extraction timestep");
    cmd->add_option("--inversion-steps", f.inversion_steps, "DDIM inversion grid size");
}

void add_generate_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("--steps", f.steps, "DDIM sampling steps");
    cmd->add_option("--opt-every", f.opt_every, "optimize every this many steps");
    cmd->add_option("--opt-threshold", f.opt_threshold, "optimize while the countdown is at least this");
    cmd->add_option("--inner-iters", f.inner_iters, "gradient steps per optimization firing");
    cmd->add_option("--lr", f.lr, "latent learning rate");
    cmd->add_flag("--dump-latents", f.dump_latents, "write every sampling and inversion latent");
    cmd->add_flag("--no-inject", f.no_inject, "disable first-frame feature injection");
    cmd->add_flag("--no-debias", f.no_debias, "inject residual states without patch AdaIN");
    cmd->add_flag("--no-kv-propagate", f.no_kv_propagate, "keep each frame's own keys and values");
    cmd->add_option("--patch-size", f.patch_size, "AdaIN patch size");
    cmd->add_option("--inject-sites", f.inject_sites, "comma-separated residual/query sites to inject");
    cmd->add_option("--traj", f.traj, "trajectory spec (JSON)");
    cmd->add_option("--pca-dim", f.pca_dim, "PCA dimension (overrides the trajectory file)");
    auto* stat = cmd->add_flag("--static-mask", f.static_mask, "freeze the frame-1 mask for every frame");
    auto* none = cmd->add_flag("--no-mask", f.no_mask, "align whole boxes without masks");
    stat->excludes(none);
    cmd->add_option("--opt-target", f.opt_target, "comma-separated optimizer sites");
    cmd->add_option("--opt-feature", f.opt_feature, "feature aligned by the optimizer")
        ->check(CLI::IsMember({"query", "residual"}));
    cmd->add_flag("--freeze-pca-basis", f.freeze_pca_basis, "keep the PCA basis of the first firing");
    cmd->add_flag("--no-optimize", f.no_optimize, "disable trajectory optimization");
}

RunConfig make_config(const Flags& f) {
    RunConfig c;
    c.backbone.seed = f.seed;
    c.backbone.frames = f.frames;
    c.backbone.height = f.size;
    c.backbone.width = f.size;
    c.backbone.temporal_enabled = !f.no_temporal;
    c.steps = f.steps;
    c.inversion_steps = f.inversion_steps;
    c.window.t_alpha = f.t_alpha;
    c.window.opt_every = f.opt_every;
    c.window.opt_threshold = f.opt_threshold;
    c.window.inner_iters = f.inner_iters;
    c.window.lr = f.lr;
    c.dump_latents = f.dump_latents;
    c.inject = !f.no_inject;
    if (f.inject_sites) c.injection = plan_from_sites(parse_tap_list(*f.inject_sites));
    c.injection.debias = !f.no_debias;
    c.injection.kv_propagate = !f.no_kv_propagate;
    c.injection.patch_size = f.patch_size;
    c.optimize = !f.no_optimize;
    c.pca_dim = f.pca_dim;
    if (f.opt_target) c.optimizer.sites = parse_tap_list(*f.opt_target);
    c.optimizer.feature = f.opt_feature == "residual" ? FeatureKind::Residual : FeatureKind::Query;
    if (f.static_mask) c.optimizer.mask_mode = MaskMode::Static;
    if (f.no_mask) c.optimizer.mask_mode = MaskMode::None;
    c.optimizer.freeze_basis = f.freeze_pca_basis;
    c.optimizer.inner_iters = f.inner_iters;
    c.optimizer.lr = f.lr;
    return c;
}

RunInputs make_inputs(const Flags& f) {
    RunInputs in;
    in.image_path = f.image;
    in.modality = f.modality;
    if (f.traj) in.trajectory_path = *f.traj;
    if (f.embedding) in.embedding.file = *f.embedding;
    in.embedding.seed = f.seed_embedding;
    if (f.checkpoint) in.checkpoint = *f.checkpoint;
    return in;
}

void maybe_save_checkpoint(const Flags& f, const RunInputs& in, const RunConfig& c) {
    if (!f.save_checkpoint) return;
    const Backbone<float> bb = in.checkpoint ? load_checkpoint(*in.checkpoint) : build_backbone(c.backbone);
    save_checkpoint(bb, *f.save_checkpoint);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Toy first-frame-injection video diffusion with trajectory control"};
    app.require_subcommand(1);
    Flags f;

    auto* invert = app.add_subcommand("invert", "DDIM-invert the condition image and dump the captured taps");
    add_input_flags(invert, f);
    add_backbone_flags(invert, f);
    invert->add_option("--inject-sites", f.inject_sites, "comma-separated sites to capture");

    auto* generate = app.add_subcommand("generate", "generate a video from a condition image");
    std::optional<std::string> replay;
    generate->add_option("image", f.image, "condition image (binary P5/P6)");
    generate->add_option("-o,--out", f.out, "output directory");
    generate->add_option("--modality", f.modality, "condition modality tag (canny, depth, skeleton, ...)");
    generate->add_option("--embedding", f.embedding, "prompt embedding as RTD1 [tokens, dim]");
    generate->add_option("--seed-embedding", f.seed_embedding, "seed of the pseudo prompt embedding");
    generate->add_option("--t-alpha", f.t_alpha, "feature extraction timestep");
    generate->add_option("--inversion-steps", f.inversion_steps, "DDIM inversion grid size");
    generate->add_option("--replay", replay, "re-run the inputs and configuration recorded in a manifest (other run flags are ignored)");
    add_backbone_flags(generate, f);
    add_generate_flags(generate, f);

    auto* inspect = app.add_subcommand("inspect-taps", "dump feature taps and their PCA renderings");
    add_input_flags(inspect, f);
    add_backbone_flags(inspect, f);
    std::string tap_list = "up.1.res.0,up.1.q.1,up.2.res.0,up.2.q.0";
    std::optional<int> timestep;
    inspect->add_option("--taps", tap_list, "comma-separated tap addresses");
    inspect->add_option("--timestep", timestep, "timestep of the forward pass (default: t-alpha)");

    auto* report = app.add_subcommand("report", "print the adherence table of a run");
    std::string manifest_path;
    report->add_option("manifest", manifest_path, "manifest.json of a generate run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInput;
    }

    try {
        if (*report) {
            std::cout << format_report(read_file(manifest_path));
            return 0;
        }
        if (*generate) {
            RunInputs in;
            RunConfig c;
            if (replay) {
                ReplaySpec spec = load_manifest(*replay);
                in = std::move(spec.inputs);
                c = std::move(spec.config);
            } else {
                if (f.image.empty()) throw InputError("generate needs a condition image or --replay");
                in = make_inputs(f);
                c = make_config(f);
            }
            maybe_save_checkpoint(f, in, c);
            const RunResult r = run_generate(in, c, f.out);
            for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
            if (!r.adherence.rows.empty()) {
                std::cout << "adherence mean centroid error: " << r.adherence.mean_error << " (" << r.adherence.counted
                          << " masks)\n";
            }
            std::cout << "wrote " << f.out << "/manifest.json\n";
            if (r.diverged) {
                std::cerr << "error: latent optimization diverged\n";
                return kExitNumeric;
            }
            return 0;
        }
        const RunInputs in = make_inputs(f);
        RunConfig c = make_config(f);
        maybe_save_checkpoint(f, in, c);
        if (*invert) {
            const InvertResult r = run_invert(in, c, f.out);
            for (const auto& w : r.inversion.warnings) std::cerr << "warning: " << w << '\n';
            std::cout << "captured taps at t=" << r.inversion.capture_timestep << " into " << f.out << '\n';
            return 0;
        }
        inspect_taps(in, c, parse_tap_list(tap_list), timestep.value_or(f.t_alpha), f.out);
        std::cout << "wrote taps to " << f.out << '\n';
        return 0;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
