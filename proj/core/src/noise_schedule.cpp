#include "anyi2v/noise_schedule.hpp"

#include <cstdlib>
#include <string>

#include "anyi2v/error.hpp"

namespace anyi2v {

Schedule Schedule::linear(int train_steps, double beta_start, double beta_end) {
    if (train_steps < 2) throw InputError("schedule needs at least 2 train steps");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) throw InputError("invalid beta range");
    Schedule s;
    s.betas_.resize(static_cast<std::size_t>(train_steps));
    s.alpha_bars_.resize(s.betas_.size());
    double prod = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        const double beta = beta_start + (beta_end - beta_start) * i / (train_steps - 1);
        prod *= 1.0 - beta;
        s.betas_[static_cast<std::size_t>(i)] = beta;
        s.alpha_bars_[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

double Schedule::alpha_bar(int t) const {
    if (t == -1) return 1.0;
    if (t < -1 || t >= train_steps()) throw InputError("timestep " + std::to_string(t) + " outside schedule");
    return alpha_bars_[static_cast<std::size_t>(t)];
}

std::vector<int> Schedule::timesteps(int steps) const {
    const int T = train_steps();
    if (steps < 1 || steps > T) throw InputError("step count " + std::to_string(steps) + " outside [1, T]");
    const int stride = T / steps;
    const int offset = stride > 1 ? 1 : 0;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(steps));
    for (int k = steps - 1; k >= 0; --k) out.push_back(k * stride + offset);
    return out;
}

int Schedule::snap(int t, int steps) const {
    int best = -1;
    for (int g : timesteps(steps)) {
        if (best < 0 || std::abs(g - t) < std::abs(best - t) || (std::abs(g - t) == std::abs(best - t) && g < best)) {
            best = g;
        }
    }
    return best;
}

}  // namespace anyi2v
