#pragma once

// Deterministic DDIM (eta = 0): noise schedule, single steps, inversion and
// hooked sampling.
//
// Timesteps are train-step indices in [0, T); -1 denotes the clean latent
// (alpha_bar = 1). Sampling steps carry a countdown index t' = S..1, so the
// first (noisiest) step has t' = S.

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "anyi2v/backbone.hpp"
#include "anyi2v/noise_schedule.hpp"
#include "anyi2v/tensor.hpp"

namespace anyi2v {

struct WindowConfig {
    int t_alpha = 201;
    int opt_every = 5;
    int opt_threshold = 20;
    int inner_iters = 5;
    double lr = 0.01;

    void validate(int train_steps) const;
};

/// Optimization fires at countdown t' when t' >= opt_threshold and
/// (S - t') is a multiple of opt_every.
bool optimization_fires(int countdown, int steps, const WindowConfig& window);
/// Every firing countdown, in sampling order.
std::vector<int> optimization_countdowns(int steps, const WindowConfig& window);
/// Features are injected at every sampling step with t >= t_alpha.
bool injection_active(int t, const WindowConfig& window);

/// z_{t_prev} = sqrt(ab_prev) * x0 + sqrt(1 - ab_prev) * eps,
/// x0 = (z_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t). Requires t >= t_prev.
template <typename T>
BasicTensor<T> ddim_step(const Schedule& schedule, const BasicTensor<T>& z_t, const BasicTensor<T>& eps, int t,
                         int t_prev);
/// Algebraic inverse of ddim_step for the same eps: maps z_{t_prev} to z_t.
template <typename T>
BasicTensor<T> ddim_inverse_step(const Schedule& schedule, const BasicTensor<T>& z_prev, const BasicTensor<T>& eps,
                                 int t_prev, int t);

/// Model evaluation used by inversion; `capture` asks for the feature taps.
using InversionModel = std::function<ForwardResult<float>(const Tensor& z, int t, bool capture)>;

struct InversionOptions {
    int steps = 1000;
    /// Timestep at which taps are captured; snapped to the grid with a warning.
    std::optional<int> capture_at;
    /// End the walk right after the capture step.
    bool stop_after_capture = false;
    /// Each step solves z_t = inverse_step(z_prev, eps(z_t, t)) by fixed-point
    /// iteration, stopping when successive iterates differ by less than
    /// max(tolerance_scale / steps^2, float epsilon) (relative L2). Zero
    /// iterations gives the explicit update that evaluates eps at z_prev.
    int fixed_point_iters = 50;
    double tolerance_scale = 1e-3;
};

struct InversionResult {
    std::vector<int> timesteps;  // ascending, one per latent
    std::vector<Tensor> latents;
    std::optional<FeatureBundle<float>> bundle;
    int capture_timestep = -1;
    std::vector<int> solver_iterations;  // per step
    std::vector<std::string> warnings;
};

/// Walks from the clean latent z0 up the `options.steps` grid.
InversionResult ddim_invert(const Schedule& schedule, const Tensor& z0, const InversionModel& model,
                            const InversionOptions& options);

/// Backbone convenience: temporal attention is disabled for every call.
InversionResult ddim_invert(const Schedule& schedule, const Tensor& z0, const Backbone<float>& backbone,
                            const Tensor& cond, const std::set<TapAddress>& taps, const InversionOptions& options);

struct StepContext {
    int countdown = 0;  // t' = S..1
    int t = 0;
    int t_prev = -1;
};

using DenoiseFn = std::function<Tensor(const Tensor& z, int t, const SiteHook<float>* hook)>;

struct SampleHooks {
    WindowConfig window;
    /// Injection hook for in-window steps; may return nullptr.
    std::function<const SiteHook<float>*(const StepContext&)> injection;
    /// Latent update applied before denoising at firing steps.
    std::function<Tensor(const Tensor& z, const StepContext&)> optimize;
    /// Called after each completed step.
    std::function<void(const StepContext&, const Tensor& z_prev)> observe;
};

struct StepEvent {
    int countdown = 0;
    int t = 0;
    bool injected = false;
    bool optimized = false;
};

struct SampleResult {
    std::vector<int> timesteps;  // timestep of each latent; the last is -1
    std::vector<Tensor> latents;
    std::vector<StepEvent> events;

    const Tensor& final_latent() const { return latents.back(); }
};

SampleResult sample(const Schedule& schedule, const Tensor& z_T, int steps, const DenoiseFn& denoise,
                    const SampleHooks& hooks = {});

/// Backbone convenience.
DenoiseFn backbone_denoiser(const Backbone<float>& backbone, const Tensor& cond, bool disable_temporal = false);

}  // namespace anyi2v
