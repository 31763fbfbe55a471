#include "anyi2v/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "anyi2v/random.hpp"
#include "anyi2v/rtd.hpp"

namespace anyi2v {

using nlohmann::json;

void RunConfig::validate() const {
    backbone.validate();
    if (train_steps != backbone.train_steps) throw InputError("run and backbone disagree on the number of train steps");
    if (steps < 1 || steps > train_steps) throw InputError("--steps must lie in [1, T]");
    if (inversion_steps < 1 || inversion_steps > train_steps) throw InputError("inversion steps must lie in [1, T]");
    window.validate(train_steps);
    if (injection.patch_size == 0) throw InputError("--patch-size must be positive");
    if (pca_dim && *pca_dim < 1) throw InputError("--pca-dim must be >= 1");
    if (optimizer.sites.empty()) throw InputError("optimizer needs at least one target site");
}

Tensor seeded_embedding(std::uint64_t seed, std::size_t tokens, std::size_t dim) {
    return Tensor({tokens, dim}, CounterRng(seed, "embedding").normals(tokens * dim));
}

AdherenceReport adherence_report(const std::vector<std::vector<Tensor>>& masks,
                                 const std::vector<std::vector<bool>>& degenerate,
                                 const std::vector<std::vector<GridBox>>& boxes) {
    if (masks.size() != boxes.size() || degenerate.size() != boxes.size()) {
        throw InputError("adherence_report: masks and boxes disagree");
    }
    AdherenceReport report;
    double total = 0.0;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i].size() != boxes[i].size() || degenerate[i].size() != boxes[i].size()) {
            throw InputError("adherence_report: frame counts disagree");
        }
        for (std::size_t j = 0; j < masks[i].size(); ++j) {
            const Tensor& m = masks[i][j];
            if (m.rank() != 2) throw ShapeError("adherence_report expects [H, W] masks");
            const std::size_t w = m.dim(1);
            const auto v = m.data();
            double sx = 0.0, sy = 0.0, n = 0.0;
            for (std::size_t q = 0; q < v.size(); ++q) {
                if (v[q] != 0.0f) {
                    sx += double(q % w);
                    sy += double(q / w);
                    n += 1.0;
                }
            }
            if (n == 0.0) throw InputError("adherence_report: mask for group " + std::to_string(i) + ", frame " +
                                           std::to_string(j + 1) + " is empty");
            AdherenceRow row;
            row.group = i;
            row.frame = j;
            row.centroid_x = sx / n;
            row.centroid_y = sy / n;
            row.center_x = double(boxes[i][j].x0 + boxes[i][j].x1) / 2.0;
            row.center_y = double(boxes[i][j].y0 + boxes[i][j].y1) / 2.0;
            row.error = std::hypot(row.centroid_x - row.center_x, row.centroid_y - row.center_y);
            row.degenerate = degenerate[i][j];
            if (!row.degenerate) {
                total += row.error;
                ++report.counted;
            }
            report.rows.push_back(row);
        }
    }
    report.mean_error = report.counted > 0 ? total / double(report.counted) : 0.0;
    return report;
}

// ---------------------------------------------------------------------------
// Manifest serialization

namespace {

json sites_json(const std::vector<TapAddress>& sites) {
    json out = json::array();
    for (const auto& a : sites) out.push_back(to_string(a));
    return out;
}

std::vector<TapAddress> sites_from(const json& j) {
    std::vector<TapAddress> out;
    for (const auto& s : j) out.push_back(parse_tap_address(s.get<std::string>()));
    return out;
}

json config_json(const RunConfig& c, int effective_pca_dim) {
    json j;
    j["train_steps"] = c.train_steps;
    j["steps"] = c.steps;
    j["inversion_steps"] = c.inversion_steps;
    j["t_alpha"] = c.window.t_alpha;
    j["opt_every"] = c.window.opt_every;
    j["opt_threshold"] = c.window.opt_threshold;
    j["inner_iters"] = c.window.inner_iters;
    j["lr"] = c.window.lr;
    j["patch_size"] = c.injection.patch_size;
    j["pca_dim"] = effective_pca_dim;
    j["pca_dim_override"] = c.pca_dim ? json(*c.pca_dim) : json(nullptr);
    j["codec_seed"] = c.codec_seed;
    j["dump_latents"] = c.dump_latents;
    j["backbone"] = c.backbone.to_text();
    j["injection"] = {{"enabled", c.inject},
                      {"residual_sites", sites_json(c.injection.residual_sites)},
                      {"query_sites", sites_json(c.injection.query_sites)},
                      {"kv_propagate", c.injection.kv_propagate},
                      {"debias", c.injection.debias}};
    j["optimizer"] = {{"enabled", c.optimize},
                      {"sites", sites_json(c.optimizer.sites)},
                      {"feature", to_string(c.optimizer.feature)},
                      {"mask_mode", to_string(c.optimizer.mask_mode)},
                      {"freeze_basis", c.optimizer.freeze_basis}};
    return j;
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    c.train_steps = j.at("train_steps").get<int>();
    c.steps = j.at("steps").get<int>();
    c.inversion_steps = j.at("inversion_steps").get<int>();
    c.window.t_alpha = j.at("t_alpha").get<int>();
    c.window.opt_every = j.at("opt_every").get<int>();
    c.window.opt_threshold = j.at("opt_threshold").get<int>();
    c.window.inner_iters = j.at("inner_iters").get<int>();
    c.window.lr = j.at("lr").get<double>();
    c.injection.patch_size = j.at("patch_size").get<std::size_t>();
    if (!j.at("pca_dim_override").is_null()) c.pca_dim = j.at("pca_dim_override").get<int>();
    c.codec_seed = j.at("codec_seed").get<std::uint64_t>();
    c.dump_latents = j.at("dump_latents").get<bool>();
    c.backbone = BackboneConfig::from_text(j.at("backbone").get<std::string>());
    const auto& inj = j.at("injection");
    c.inject = inj.at("enabled").get<bool>();
    c.injection.residual_sites = sites_from(inj.at("residual_sites"));
    c.injection.query_sites = sites_from(inj.at("query_sites"));
    c.injection.kv_propagate = inj.at("kv_propagate").get<bool>();
    c.injection.debias = inj.at("debias").get<bool>();
    const auto& opt = j.at("optimizer");
    c.optimize = opt.at("enabled").get<bool>();
    c.optimizer.sites = sites_from(opt.at("sites"));
    const std::string feature = opt.at("feature").get<std::string>();
    if (feature == "query") {
        c.optimizer.feature = FeatureKind::Query;
    } else if (feature == "residual") {
        c.optimizer.feature = FeatureKind::Residual;
    } else {
        throw InputError("manifest has unknown optimizer feature '" + feature + "'");
    }
    const std::string mode = opt.at("mask_mode").get<std::string>();
    if (mode == "semantic") {
        c.optimizer.mask_mode = MaskMode::Semantic;
    } else if (mode == "static") {
        c.optimizer.mask_mode = MaskMode::Static;
    } else if (mode == "none") {
        c.optimizer.mask_mode = MaskMode::None;
    } else {
        throw InputError("manifest has unknown mask mode '" + mode + "'");
    }
    c.optimizer.freeze_basis = opt.at("freeze_basis").get<bool>();
    return c;
}

json inputs_json(const RunInputs& in) {
    json j;
    j["image"] = in.image_path.string();
    j["modality"] = in.modality;
    j["trajectory"] = in.trajectory_path ? json(in.trajectory_path->string()) : json(nullptr);
    j["embedding_file"] = in.embedding.file ? json(in.embedding.file->string()) : json(nullptr);
    j["embedding_seed"] = in.embedding.seed;
    j["checkpoint"] = in.checkpoint ? json(in.checkpoint->string()) : json(nullptr);
    return j;
}

RunInputs inputs_from_json(const json& j) {
    RunInputs in;
    in.image_path = j.at("image").get<std::string>();
    in.modality = j.at("modality").get<std::string>();
    if (!j.at("trajectory").is_null()) in.trajectory_path = j.at("trajectory").get<std::string>();
    if (!j.at("embedding_file").is_null()) in.embedding.file = j.at("embedding_file").get<std::string>();
    in.embedding.seed = j.at("embedding_seed").get<std::uint64_t>();
    if (!j.at("checkpoint").is_null()) in.checkpoint = j.at("checkpoint").get<std::string>();
    return in;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream ss;
    ss << std::hex;
    ss.width(16);
    ss.fill('0');
    ss << v;
    return ss.str();
}

// ---------------------------------------------------------------------------
// Shared run preparation

struct Prepared {
    Backbone<float> backbone;
    RunConfig config;
    Tensor cond;
    Image image;
    ToyCodec codec{1, 1, 0};
    Tensor condition_latent;
    Schedule schedule;
    std::optional<TrajectoryContext> trajectory;
    int pca_dim = 64;
    std::vector<std::string> warnings;
};

Prepared prepare(const RunInputs& inputs, const RunConfig& config) {
    Prepared p;
    p.config = config;
    if (inputs.checkpoint) {
        try {
            p.backbone = load_checkpoint(*inputs.checkpoint);
        } catch (...) {
            rethrow_with_context("loading checkpoint " + inputs.checkpoint->string());
        }
        p.config.backbone = p.backbone.config();
    } else {
        config.backbone.validate();
        p.backbone = build_backbone(config.backbone);
    }
    p.config.validate();
    const auto& bc = p.config.backbone;
    if (p.config.inject) p.config.injection.validate(p.backbone);
    for (const auto& a : p.config.optimizer.feature_sites()) {
        if (!p.backbone.resolves(a)) throw InputError("optimizer site does not resolve: " + to_string(a));
    }

    p.image = read_netpbm(inputs.image_path);
    p.image.modality = inputs.modality;
    const auto lh = static_cast<std::size_t>(bc.height), lw = static_cast<std::size_t>(bc.width);
    if (p.image.height % lh != 0 || p.image.width % lw != 0 || p.image.height / lh != p.image.width / lw) {
        throw InputError("image " + std::to_string(p.image.width) + "x" + std::to_string(p.image.height) +
                         " is not a uniform multiple of the " + std::to_string(lw) + "x" + std::to_string(lh) +
                         " latent grid");
    }
    p.codec = ToyCodec(static_cast<std::size_t>(bc.latent_channels), p.image.height / lh, p.config.codec_seed);
    p.condition_latent = p.codec.encode(p.image);

    const Shape cond_shape{std::size_t(bc.cond_tokens), std::size_t(bc.cond_dim)};
    if (inputs.embedding.file) {
        p.cond = rtd::load(*inputs.embedding.file);
        if (p.cond.shape() != cond_shape) {
            throw InputError("embedding " + inputs.embedding.file->string() + " has shape " + to_string(p.cond.shape()) +
                             ", expected " + to_string(cond_shape));
        }
    } else {
        p.cond = seeded_embedding(inputs.embedding.seed, cond_shape[0], cond_shape[1]);
    }

    p.schedule = Schedule::linear(bc.train_steps, bc.beta_start, bc.beta_end);
    p.pca_dim = p.config.pca_dim.value_or(64);
    if (inputs.trajectory_path) {
        TrajectoryContext ctx;
        ctx.spec = TrajectorySpec::load(*inputs.trajectory_path);
        if (p.config.pca_dim) {
            ctx.spec.pca_dim = *p.config.pca_dim;
        }
        p.pca_dim = ctx.spec.pca_dim;
        ctx.image_height = p.image.height;
        ctx.image_width = p.image.width;
        try {
            ctx.spec.validate(static_cast<std::size_t>(bc.frames), p.image.height, p.image.width);
        } catch (...) {
            rethrow_with_context(inputs.trajectory_path->string());
        }
        p.trajectory = std::move(ctx);
    }
    return p;
}

FeatureBundle<float> invert_and_capture(Prepared& p, std::set<TapAddress> taps, InversionResult* out,
                                        bool stop_after_capture) {
    InversionOptions opt;
    opt.steps = p.config.inversion_steps;
    opt.capture_at = p.config.window.t_alpha;
    opt.stop_after_capture = stop_after_capture;
    InversionResult inv = ddim_invert(p.schedule, p.condition_latent, p.backbone, p.cond, taps, opt);
    p.warnings.insert(p.warnings.end(), inv.warnings.begin(), inv.warnings.end());
    if (!inv.bundle) throw Error("inversion finished without capturing features");
    FeatureBundle<float> bundle = *inv.bundle;
    if (out != nullptr) *out = std::move(inv);
    return bundle;
}

Tensor spatial_site(const Backbone<float>& bb, const TapAddress& a, const Tensor& x) {
    if (a.kind == TapKind::ResidualHidden) return x;
    const auto [h, w] = bb.site_grid(a);
    return spatial_from_tokens(x, h, w);
}

Image mask_image(const Tensor& mask) {
    Image img;
    img.height = mask.dim(0);
    img.width = mask.dim(1);
    img.channels = 1;
    for (float v : mask.data()) img.pixels.push_back(v != 0.0f ? 255 : 0);
    return img;
}

std::string two_digits(std::size_t v) { return (v < 10 ? "0" : "") + std::to_string(v); }

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw Error("cannot write " + path.string());
}

}  // namespace

RunResult run_generate(const RunInputs& inputs, const RunConfig& config, const std::filesystem::path& out_dir) {
    Prepared p = prepare(inputs, config);
    const auto& bc = p.config.backbone;
    std::filesystem::create_directories(out_dir);
    RunResult result;

    InversionResult inversion;
    std::optional<InjectionHook<float>> hook;
    if (p.config.inject) {
        FeatureBundle<float> bundle;
        try {
            bundle = invert_and_capture(p, p.config.injection.required_taps(), &inversion, true);
        } catch (...) {
            rethrow_with_context("inversion");
        }
        hook.emplace(std::move(bundle), p.config.injection);
    }

    const auto f = static_cast<std::size_t>(bc.frames);
    const Shape latent_shape{f, std::size_t(bc.latent_channels), std::size_t(bc.height), std::size_t(bc.width)};
    const Tensor z_T(latent_shape, CounterRng(bc.seed, "noise").normals(numel(latent_shape)));

    OptimizerConfig opt_cfg = p.config.optimizer;
    opt_cfg.inner_iters = p.config.window.inner_iters;
    opt_cfg.lr = p.config.window.lr;
    const auto feature_sites = opt_cfg.feature_sites();
    OptimizerState opt_state;

    json events = json::array();
    std::map<int, json> firing_log;

    SampleHooks hooks;
    hooks.window = p.config.window;
    if (hook) hooks.injection = [&](const StepContext&) -> const SiteHook<float>* { return &*hook; };
    if (p.config.optimize && p.trajectory) {
        hooks.optimize = [&](const Tensor& z, const StepContext& ctx) {
            const SiteHook<float>* step_hook = hook && injection_active(ctx.t, p.config.window) ? &*hook : nullptr;
            FeatureFn<float> features = [&](const Tensor& input) {
                ForwardOptions<float> o;
                o.taps.insert(feature_sites.begin(), feature_sites.end());
                o.hook = step_hook;
                const auto fr = p.backbone.forward(input, ctx.t, p.cond, o);
                std::map<TapAddress, Tensor> out;
                for (const auto& a : feature_sites) out.emplace(a, spatial_site(p.backbone, a, fr.bundle.at(a)));
                return out;
            };
            auto r = optimize_latent<float>(z, features, *p.trajectory, opt_cfg, &opt_state);
            json log;
            log["losses"] = r.losses;
            log["diverged"] = r.diverged;
            json terms = json::array();
            for (const auto& t : r.terms) {
                terms.push_back({{"group", t.group}, {"frame", t.frame + 1}, {"loss", t.loss}, {"empty_overlap", t.empty_overlap}});
            }
            log["terms"] = std::move(terms);
            firing_log[ctx.countdown] = std::move(log);
            for (auto& w : r.warnings) p.warnings.push_back("t'=" + std::to_string(ctx.countdown) + ": " + w);
            if (r.diverged) result.diverged = true;
            return r.latent;
        };
    }

    SampleResult sampled = sample(p.schedule, z_T, p.config.steps, backbone_denoiser(p.backbone, p.cond), hooks);
    for (const auto& ev : sampled.events) {
        json e{{"countdown", ev.countdown}, {"t", ev.t}, {"injected", ev.injected}, {"optimized", ev.optimized}};
        if (auto it = firing_log.find(ev.countdown); it != firing_log.end()) e["optimization"] = it->second;
        events.push_back(std::move(e));
    }
    result.final_latent = sampled.final_latent();

    json artifacts;
    artifacts["frames"] = json::array();
    result.frames = p.codec.decode(result.final_latent);
    for (std::size_t j = 0; j < result.frames.size(); ++j) {
        const std::string name = "frame_" + two_digits(j + 1) + ".ppm";
        write_netpbm(out_dir / name, result.frames[j]);
        artifacts["frames"].push_back(name);
    }
    artifacts["latents"] = json::array();
    rtd::save(out_dir / "latent_final.rtd", result.final_latent);
    artifacts["latents"].push_back("latent_final.rtd");
    if (p.config.dump_latents) {
        for (std::size_t k = 0; k < sampled.latents.size(); ++k) {
            const std::string name = "latent_step_" + two_digits(k) + ".rtd";
            rtd::save(out_dir / name, sampled.latents[k]);
            artifacts["latents"].push_back(name);
        }
        for (std::size_t k = 0; k < inversion.latents.size(); ++k) {
            const std::string name = "inversion_t" + std::to_string(inversion.timesteps[k]) + ".rtd";
            rtd::save(out_dir / name, inversion.latents[k]);
            artifacts["latents"].push_back(name);
        }
    }

    json adherence = nullptr;
    artifacts["masks"] = json::array();
    if (p.trajectory) {
        // Report masks: the final latent evaluated at the last injected grid step, so frame 1 carries the same
        // injected reference features the optimizer aligned to. Finest optimizer site.
        TapAddress site = feature_sites.front();
        for (const auto& a : feature_sites) {
            if (p.backbone.site_grid(a).first > p.backbone.site_grid(site).first) site = a;
        }
        const auto grid = p.schedule.timesteps(p.config.steps);
        int t_report = grid.back();
        for (int t : grid) {
            if (injection_active(t, p.config.window)) t_report = t;
        }
        ForwardOptions<float> o;
        o.taps = {site};
        o.hook = hook && injection_active(t_report, p.config.window) ? &*hook : nullptr;
        const auto fr = p.backbone.forward(result.final_latent, t_report, p.cond, o);
        const Tensor features = spatial_site(p.backbone, site, fr.bundle.at(site));
        const Tensor reduced = pca_project(features, fit_pca(features, std::size_t(p.pca_dim)));
        const auto lh = std::size_t(bc.height), lw = std::size_t(bc.width);
        std::vector<std::vector<Tensor>> masks;
        std::vector<std::vector<bool>> degenerate;
        std::vector<std::vector<GridBox>> boxes;
        const auto& ctx = *p.trajectory;
        for (std::size_t i = 0; i < ctx.spec.groups.size(); ++i) {
            masks.emplace_back();
            degenerate.emplace_back();
            boxes.emplace_back();
            result.masks.emplace_back();
            for (std::size_t j = 0; j < f; ++j) {
                const BinaryMask m = frame_mask(reduced, ctx, i, j);
                masks[i].push_back(resample_nearest(m.values, lh, lw));
                degenerate[i].push_back(m.degenerate);
                boxes[i].push_back(map_box_to_grid(ctx.spec.groups[i].boxes[j], ctx.image_height, ctx.image_width, lh, lw));
                result.masks[i].push_back(mask_image(masks[i].back()));
                const std::string name = "mask_g" + std::to_string(i) + "_f" + two_digits(j + 1) + ".pgm";
                write_netpbm(out_dir / name, result.masks[i].back());
                artifacts["masks"].push_back(name);
            }
        }
        result.adherence = adherence_report(masks, degenerate, boxes);
        adherence = json::object();
        adherence["site"] = to_string(site);
        adherence["timestep"] = t_report;
        adherence["mean_error"] = result.adherence.mean_error;
        adherence["counted"] = result.adherence.counted;
        adherence["rows"] = json::array();
        for (const auto& r : result.adherence.rows) {
            adherence["rows"].push_back({{"group", r.group},
                                         {"frame", r.frame + 1},
                                         {"centroid", {r.centroid_x, r.centroid_y}},
                                         {"target", {r.center_x, r.center_y}},
                                         {"error", r.error},
                                         {"degenerate", r.degenerate}});
        }
    } else if (p.config.optimize) {
        p.warnings.push_back("no trajectory given; latent optimization skipped");
    }

    json manifest;
    manifest["schema_version"] = kManifestSchemaVersion;
    manifest["seed"] = bc.seed;
    manifest["config"] = config_json(p.config, p.pca_dim);
    manifest["inputs"] = inputs_json(inputs);
    if (p.trajectory) manifest["trajectory_spec"] = json::parse(p.trajectory->spec.to_json());
    manifest["backbone_checksum"] = hex64(p.backbone.checksum());
    manifest["inversion"] = {{"capture_timestep", inversion.capture_timestep},
                             {"steps_run", inversion.timesteps.size()},
                             {"solver_iterations", inversion.solver_iterations}};
    manifest["events"] = std::move(events);
    manifest["adherence"] = std::move(adherence);
    manifest["diverged"] = result.diverged;
    manifest["warnings"] = p.warnings;
    artifacts["manifest"] = "manifest.json";
    manifest["artifacts"] = std::move(artifacts);
    result.warnings = p.warnings;
    result.manifest = manifest.dump(2) + "\n";
    write_text(out_dir / "manifest.json", result.manifest);
    return result;
}

InvertResult run_invert(const RunInputs& inputs, const RunConfig& config, const std::filesystem::path& out_dir) {
    Prepared p = prepare(inputs, config);
    std::filesystem::create_directories(out_dir);
    InvertResult r;
    r.condition_latent = p.condition_latent;
    std::set<TapAddress> taps = p.config.injection.required_taps();
    const auto bundle = invert_and_capture(p, taps, &r.inversion, false);
    r.inversion.warnings = p.warnings;
    rtd::save(out_dir / "condition_latent.rtd", p.condition_latent);
    rtd::save(out_dir / "inverted_latent.rtd", r.inversion.latents.back());
    json taps_json = json::array();
    for (const auto& [a, t] : bundle.taps) {
        const std::string name = "tap_" + to_string(a) + ".rtd";
        rtd::save(out_dir / name, t);
        taps_json.push_back(name);
    }
    json summary{{"schema_version", kManifestSchemaVersion},
                 {"inputs", inputs_json(inputs)},
                 {"config", config_json(p.config, p.pca_dim)},
                 {"capture_timestep", r.inversion.capture_timestep},
                 {"final_timestep", r.inversion.timesteps.back()},
                 {"solver_iterations", r.inversion.solver_iterations},
                 {"taps", taps_json},
                 {"warnings", p.warnings}};
    write_text(out_dir / "inversion.json", summary.dump(2) + "\n");
    return r;
}

void inspect_taps(const RunInputs& inputs, const RunConfig& config, const std::vector<TapAddress>& taps, int timestep,
                  const std::filesystem::path& out_dir) {
    Prepared p = prepare(inputs, config);
    if (timestep < 0 || timestep >= p.config.train_steps) throw InputError("timestep outside [0, T)");
    std::filesystem::create_directories(out_dir);
    ForwardOptions<float> o;
    o.taps.insert(taps.begin(), taps.end());
    o.disable_temporal = true;
    const auto fr = p.backbone.forward(p.condition_latent, timestep, p.cond, o);
    for (const auto& [a, t] : fr.bundle.taps) {
        const std::string stem = "tap_" + to_string(a);
        rtd::save(out_dir / (stem + ".rtd"), t);
        if (a.kind == TapKind::AttentionMap) continue;
        const Tensor spatial = spatial_site(p.backbone, a, t);
        const PcaBasis basis = fit_pca(spatial, 3);
        const Tensor reduced = pca_project(spatial, basis);  // [1, 3, H, W]
        const std::size_t h = reduced.dim(2), w = reduced.dim(3);
        const auto v = reduced.data();
        Image img;
        img.width = w;
        img.height = h;
        img.channels = 3;
        img.pixels.resize(h * w * 3);
        for (std::size_t c = 0; c < 3; ++c) {
            const auto begin = v.begin() + std::ptrdiff_t(c * h * w);
            const auto [lo, hi] = std::minmax_element(begin, begin + std::ptrdiff_t(h * w));
            const double range = std::max(double(*hi) - double(*lo), 1e-12);
            for (std::size_t q = 0; q < h * w; ++q) {
                img.pixels[q * 3 + c] = static_cast<std::uint8_t>(std::lround(255.0 * (double(begin[std::ptrdiff_t(q)]) - *lo) / range));
            }
        }
        write_netpbm(out_dir / (stem + "_pca.ppm"), img);
    }
}

ReplaySpec parse_manifest(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::exception& e) {
        throw InputError(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("schema_version") || !doc["schema_version"].is_number_integer()) {
        throw InputError("manifest has no schema_version");
    }
    const int version = doc["schema_version"].get<int>();
    if (version != kManifestSchemaVersion) {
        throw InputError("unsupported manifest schema_version " + std::to_string(version) + " (this build reads " +
                         std::to_string(kManifestSchemaVersion) + ")");
    }
    try {
        return ReplaySpec{inputs_from_json(doc.at("inputs")), config_from_json(doc.at("config"))};
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed manifest: ") + e.what());
    }
}

ReplaySpec load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open manifest " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_manifest(ss.str());
    } catch (...) {
        rethrow_with_context(path.string());
    }
}

std::string format_report(const std::string& manifest_json) {
    parse_manifest(manifest_json);
    const json doc = json::parse(manifest_json);
    std::ostringstream out;
    const auto& adh = doc.at("adherence");
    if (adh.is_null()) {
        out << "no trajectory in this run; nothing to report\n";
        return out.str();
    }
    out << "site " << adh.at("site").get<std::string>() << " (latent-grid units)\n";
    out << "group frame  centroid(x,y)      target(x,y)     error  note\n";
    char line[160];
    for (const auto& r : adh.at("rows")) {
        std::snprintf(line, sizeof line, "%5d %5d  (%6.2f,%6.2f)  (%6.2f,%6.2f)  %7.3f  %s\n", r.at("group").get<int>(),
                      r.at("frame").get<int>(), r.at("centroid")[0].get<double>(), r.at("centroid")[1].get<double>(),
                      r.at("target")[0].get<double>(), r.at("target")[1].get<double>(), r.at("error").get<double>(),
                      r.at("degenerate").get<bool>() ? "degenerate, excluded" : "");
        out << line;
    }
    std::snprintf(line, sizeof line, "mean error %.4f over %d masks\n", adh.at("mean_error").get<double>(),
                  adh.at("counted").get<int>());
    out << line;
    return out.str();
}

}  // namespace anyi2v
