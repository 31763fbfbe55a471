#pragma once

// Linear-beta diffusion noise schedule and its DDIM timestep grids.

#include <vector>

namespace anyi2v {

class Schedule {
public:
    /// Betas linear in [beta_start, beta_end] over `train_steps`.
    static Schedule linear(int train_steps = 1000, double beta_start = 8.5e-4, double beta_end = 1.2e-2);

    int train_steps() const { return static_cast<int>(betas_.size()); }
    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alpha_bars() const { return alpha_bars_; }
    /// alpha_bar(t) for t in [-1, T); alpha_bar(-1) = 1.
    double alpha_bar(int t) const;

    /// Descending timesteps for an S-step grid: k*(T/S) + offset for k = S-1..0,
    /// with offset 1 when T/S > 1 (so 25 steps give 961, 921, ..., 1).
    std::vector<int> timesteps(int steps) const;
    /// Nearest grid timestep to `t`.
    int snap(int t, int steps) const;

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

}  // namespace anyi2v
