#pragma once

// First-frame feature injection: patch-wise AdaIN debiasing of residual hidden
// states, query substitution and first-frame key/value propagation.

#include <vector>

#include "anyi2v/backbone.hpp"
#include "anyi2v/tensor.hpp"

namespace anyi2v {

/// Floor for sigma denominators; a constant patch maps onto the source mean.
inline constexpr double kAdainEpsilon = 1e-6;

/// [B, C, H, W] -> [B, (H/p)*(W/p), C, p, p], patches in row-major order.
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& h, std::size_t patch);
/// Inverse of patchify for an H x W grid.
template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& patches, std::size_t height, std::size_t width);

/// Re-normalizes every (patch, channel) of `content` to the mean and
/// population standard deviation of the same (patch, channel) of `source`.
/// Both are [B, C, H, W]; the result has the same shape.
template <typename T>
BasicTensor<T> adain_patch(const BasicTensor<T>& content, const BasicTensor<T>& source, std::size_t patch,
                           double epsilon = kAdainEpsilon);

struct InjectionPlan {
    std::vector<TapAddress> residual_sites{parse_tap_address("up.1.res.0"), parse_tap_address("up.2.res.0")};
    std::vector<TapAddress> query_sites{parse_tap_address("up.1.q.0"), parse_tap_address("up.1.q.1"),
                                        parse_tap_address("up.2.q.0"), parse_tap_address("up.2.q.1")};
    bool kv_propagate = true;
    bool debias = true;
    std::size_t patch_size = 4;

    /// Every site the plan reads from a feature bundle.
    std::set<TapAddress> required_taps() const;
    /// Checks site kinds, resolvability and patch divisibility on `backbone`.
    template <typename T>
    void validate(const Backbone<T>& backbone) const;
};

/// Builds an injection plan from a mixed site list: residual addresses go to
/// the residual list and query addresses to the query list.
InjectionPlan plan_from_sites(const std::vector<TapAddress>& sites);

/// Replaces frame 1 of the live features at the plan's sites with the stored
/// first-frame features (residual states debiased against the live frame-1
/// state) and requests first-frame key/value propagation.
template <typename T>
class InjectionHook final : public SiteHook<T> {
public:
    InjectionHook(FeatureBundle<T> bundle, InjectionPlan plan);

    BasicTensor<T> at_site(const TapAddress& site, const BasicTensor<T>& live) const override;
    bool propagate_first_frame_kv() const override { return plan_.kv_propagate; }

    const InjectionPlan& plan() const { return plan_; }
    const FeatureBundle<T>& bundle() const { return bundle_; }

private:
    FeatureBundle<T> bundle_;
    InjectionPlan plan_;
    std::set<TapAddress> residual_;
    std::set<TapAddress> query_;
};

template <typename U, typename T>
FeatureBundle<U> cast_bundle(const FeatureBundle<T>& bundle) {
    FeatureBundle<U> out;
    out.timestep = bundle.timestep;
    for (const auto& [k, v] : bundle.taps) out.taps.emplace(k, v.template cast<U>());
    return out;
}

}  // namespace anyi2v
