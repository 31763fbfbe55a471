#include "anyi2v/scheduler.hpp"

#include <cmath>
#include <algorithm>
#include <cstdlib>
#include <limits>

namespace anyi2v {

void WindowConfig::validate(int train_steps) const {
    if (t_alpha <= 0 || t_alpha >= train_steps) throw InputError("t_alpha must lie in (0, T)");
    if (opt_every < 1) throw InputError("opt_every must be >= 1");
    if (inner_iters < 0) throw InputError("inner_iters must be >= 0");
    if (!(lr > 0.0)) throw InputError("learning rate must be positive");
}

bool optimization_fires(int countdown, int steps, const WindowConfig& w) {
    return countdown >= w.opt_threshold && (steps - countdown) % w.opt_every == 0;
}

std::vector<int> optimization_countdowns(int steps, const WindowConfig& w) {
    std::vector<int> out;
    for (int c = steps; c >= 1; --c) {
        if (optimization_fires(c, steps, w)) out.push_back(c);
    }
    return out;
}

bool injection_active(int t, const WindowConfig& w) { return t >= w.t_alpha; }

template <typename T>
BasicTensor<T> ddim_step(const Schedule& schedule, const BasicTensor<T>& z_t, const BasicTensor<T>& eps, int t,
                         int t_prev) {
    if (t < t_prev) throw InputError("ddim_step needs t >= t_prev");
    if (z_t.shape() != eps.shape()) throw ShapeError("ddim_step: latent and noise shapes differ");
    if (t == t_prev) return z_t.detach();
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    // z_prev = a * z_t + b * eps
    const double a = std::sqrt(ab_prev / ab);
    const double b = std::sqrt(1.0 - ab_prev) - std::sqrt(ab_prev) * std::sqrt(1.0 - ab) / std::sqrt(ab);
    std::vector<T> out(z_t.numel());
    const auto z = z_t.data();
    const auto e = eps.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * z[i] + b * e[i]);
    return BasicTensor<T>(z_t.shape(), std::move(out));
}

template <typename T>
BasicTensor<T> ddim_inverse_step(const Schedule& schedule, const BasicTensor<T>& z_prev, const BasicTensor<T>& eps,
                                 int t_prev, int t) {
    if (t < t_prev) throw InputError("ddim_inverse_step needs t >= t_prev");
    if (z_prev.shape() != eps.shape()) throw ShapeError("ddim_inverse_step: latent and noise shapes differ");
    if (t == t_prev) return z_prev.detach();
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const double a = std::sqrt(ab / ab_prev);
    const double b = std::sqrt(1.0 - ab) - std::sqrt(ab) * std::sqrt(1.0 - ab_prev) / std::sqrt(ab_prev);
    std::vector<T> out(z_prev.numel());
    const auto z = z_prev.data();
    const auto e = eps.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * z[i] + b * e[i]);
    return BasicTensor<T>(z_prev.shape(), std::move(out));
}

namespace {

double relative_change(const Tensor& next, const Tensor& prev) {
    double num = 0.0, den = 0.0;
    const auto a = next.data();
    const auto b = prev.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        num += d * d;
        den += static_cast<double>(b[i]) * b[i];
    }
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

}  // namespace

InversionResult ddim_invert(const Schedule& schedule, const Tensor& z0, const InversionModel& model,
                            const InversionOptions& options) {
    if (options.fixed_point_iters < 0) throw InputError("fixed_point_iters must be >= 0");
    std::vector<int> grid = schedule.timesteps(options.steps);
    std::reverse(grid.begin(), grid.end());
    InversionResult r;
    if (options.capture_at) {
        const int snapped = schedule.snap(*options.capture_at, options.steps);
        if (snapped != *options.capture_at) {
            r.warnings.push_back("t_alpha " + std::to_string(*options.capture_at) + " is not on the " +
                                 std::to_string(options.steps) + "-step inversion grid; snapped to " +
                                 std::to_string(snapped));
        }
        r.capture_timestep = snapped;
    }
    // Float iterates cannot resolve relative changes below machine epsilon.
    const double tolerance =
        std::max(options.tolerance_scale / (static_cast<double>(options.steps) * static_cast<double>(options.steps)),
                 static_cast<double>(std::numeric_limits<float>::epsilon()));
    Tensor z = z0.detach();
    int t_prev = -1;
    for (int t : grid) {
        const bool capture = options.capture_at.has_value() && t == r.capture_timestep;
        int iterations = 0;
        try {
            Tensor z_t = ddim_inverse_step(schedule, z, model(z, t, false).eps, t_prev, t);
            for (; iterations < options.fixed_point_iters; ++iterations) {
                Tensor next = ddim_inverse_step(schedule, z, model(z_t, t, false).eps, t_prev, t);
                const double change = relative_change(next, z_t);
                z_t = std::move(next);
                if (change < tolerance) {
                    ++iterations;
                    break;
                }
            }
            if (capture) {
                ForwardResult<float> fr = model(z_t, t, true);
                r.bundle = std::move(fr.bundle);
                r.bundle->timestep = t;
            }
            z = std::move(z_t);
        } catch (...) {
            rethrow_with_context("inversion step t=" + std::to_string(t));
        }
        r.timesteps.push_back(t);
        r.latents.push_back(z);
        r.solver_iterations.push_back(iterations);
        t_prev = t;
        if (capture && options.stop_after_capture) break;
    }
    return r;
}

InversionResult ddim_invert(const Schedule& schedule, const Tensor& z0, const Backbone<float>& backbone,
                            const Tensor& cond, const std::set<TapAddress>& taps, const InversionOptions& options) {
    InversionModel model = [&](const Tensor& z, int t, bool capture) {
        ForwardOptions<float> opt;
        opt.disable_temporal = true;
        if (capture) opt.taps = taps;
        return backbone.forward(z, t, cond, opt);
    };
    return ddim_invert(schedule, z0, model, options);
}

SampleResult sample(const Schedule& schedule, const Tensor& z_T, int steps, const DenoiseFn& denoise,
                    const SampleHooks& hooks) {
    const std::vector<int> grid = schedule.timesteps(steps);
    SampleResult r;
    Tensor z = z_T.detach();
    r.timesteps.push_back(grid.front());
    r.latents.push_back(z);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        StepContext ctx;
        ctx.countdown = steps - static_cast<int>(i);
        ctx.t = grid[i];
        ctx.t_prev = i + 1 < grid.size() ? grid[i + 1] : -1;
        StepEvent ev{ctx.countdown, ctx.t, false, false};
        const std::string where = "sampling step t'=" + std::to_string(ctx.countdown) + " (t=" + std::to_string(ctx.t) + ")";
        try {
            if (hooks.optimize && optimization_fires(ctx.countdown, steps, hooks.window)) {
                z = hooks.optimize(z, ctx).detach();
                ev.optimized = true;
            }
            const SiteHook<float>* hook = nullptr;
            if (hooks.injection && injection_active(ctx.t, hooks.window)) hook = hooks.injection(ctx);
            ev.injected = hook != nullptr;
            const Tensor eps = denoise(z, ctx.t, hook);
            z = ddim_step(schedule, z, eps, ctx.t, ctx.t_prev);
            if (hooks.observe) hooks.observe(ctx, z);
        } catch (...) {
            rethrow_with_context(where);
        }
        r.timesteps.push_back(ctx.t_prev);
        r.latents.push_back(z);
        r.events.push_back(ev);
    }
    return r;
}

DenoiseFn backbone_denoiser(const Backbone<float>& backbone, const Tensor& cond, bool disable_temporal) {
    return [&backbone, cond, disable_temporal](const Tensor& z, int t, const SiteHook<float>* hook) {
        ForwardOptions<float> opt;
        opt.hook = hook;
        opt.disable_temporal = disable_temporal;
        return backbone.forward(z, t, cond, opt).eps;
    };
}

template Tensor ddim_step<float>(const Schedule&, const Tensor&, const Tensor&, int, int);
template TensorD ddim_step<double>(const Schedule&, const TensorD&, const TensorD&, int, int);
template Tensor ddim_inverse_step<float>(const Schedule&, const Tensor&, const Tensor&, int, int);
template TensorD ddim_inverse_step<double>(const Schedule&, const TensorD&, const TensorD&, int, int);

}  // namespace anyi2v
