#include "anyi2v/injection.hpp"

namespace anyi2v {

template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& h, std::size_t patch) {
    if (h.rank() != 4) throw ShapeError("patchify expects [B, C, H, W], got " + to_string(h.shape()));
    const std::size_t b = h.dim(0), c = h.dim(1), hh = h.dim(2), ww = h.dim(3);
    if (patch == 0 || hh % patch != 0 || ww % patch != 0) {
        throw ShapeError("patch size " + std::to_string(patch) + " does not divide " + std::to_string(hh) + "x" +
                         std::to_string(ww));
    }
    const std::size_t gh = hh / patch, gw = ww / patch;
    const auto split = reshape(h, {b, c, gh, patch, gw, patch});
    return reshape(permute(split, {0, 2, 4, 1, 3, 5}), {b, gh * gw, c, patch, patch});
}

template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& patches, std::size_t height, std::size_t width) {
    if (patches.rank() != 5 || patches.dim(3) != patches.dim(4)) {
        throw ShapeError("unpatchify expects [B, N, C, p, p], got " + to_string(patches.shape()));
    }
    const std::size_t b = patches.dim(0), c = patches.dim(2), p = patches.dim(3);
    if (height % p != 0 || width % p != 0 || (height / p) * (width / p) != patches.dim(1)) {
        throw ShapeError("patch grid " + to_string(patches.shape()) + " does not tile " + std::to_string(height) +
                         "x" + std::to_string(width));
    }
    const auto split = reshape(patches, {b, height / p, width / p, c, p, p});
    return reshape(permute(split, {0, 3, 1, 4, 2, 5}), {b, c, height, width});
}

template <typename T>
BasicTensor<T> adain_patch(const BasicTensor<T>& content, const BasicTensor<T>& source, std::size_t patch,
                           double epsilon) {
    if (content.shape() != source.shape()) {
        throw ShapeError("adain_patch: content " + to_string(content.shape()) + " vs source " +
                         to_string(source.shape()));
    }
    const std::size_t hh = content.dim(2), ww = content.dim(3);
    auto flat = [patch](const BasicTensor<T>& x) {
        const auto p = patchify(x, patch);
        return reshape(p, {p.dim(0), p.dim(1), p.dim(2), patch * patch});
    };
    auto moments = [](const BasicTensor<T>& x) {
        const auto mu = mean_along(x, 3);
        const auto centered = sub(x, mu);
        return std::pair{mu, square_root(mean_along(square(centered), 3))};
    };
    const auto xi = flat(content);
    const auto xs = flat(source);
    const auto [mu_i, sd_i] = moments(xi);
    const auto [mu_s, sd_s] = moments(xs);
    const auto normalized = div(sub(xi, mu_i), clamp_min(sd_i, epsilon));
    const auto out = add(mul(normalized, sd_s), mu_s);
    return unpatchify(reshape(out, {xi.dim(0), xi.dim(1), xi.dim(2), patch, patch}), hh, ww);
}

std::set<TapAddress> InjectionPlan::required_taps() const {
    std::set<TapAddress> out(residual_sites.begin(), residual_sites.end());
    out.insert(query_sites.begin(), query_sites.end());
    return out;
}

template <typename T>
void InjectionPlan::validate(const Backbone<T>& backbone) const {
    if (patch_size == 0) throw InputError("patch size must be positive");
    for (const auto& a : residual_sites) {
        if (a.kind != TapKind::ResidualHidden) throw InputError("not a residual site: " + to_string(a));
        if (!backbone.resolves(a)) throw InputError("injection site does not resolve: " + to_string(a));
        const auto [gh, gw] = backbone.site_grid(a);
        if (gh % patch_size != 0 || gw % patch_size != 0) {
            throw InputError("patch size " + std::to_string(patch_size) + " does not divide the " +
                             std::to_string(gh) + "x" + std::to_string(gw) + " grid at " + to_string(a));
        }
    }
    for (const auto& a : query_sites) {
        if (a.kind != TapKind::Query) throw InputError("not a query site: " + to_string(a));
        if (!backbone.resolves(a)) throw InputError("injection site does not resolve: " + to_string(a));
    }
}

InjectionPlan plan_from_sites(const std::vector<TapAddress>& sites) {
    InjectionPlan plan;
    plan.residual_sites.clear();
    plan.query_sites.clear();
    for (const auto& a : sites) {
        if (a.kind == TapKind::ResidualHidden) {
            plan.residual_sites.push_back(a);
        } else if (a.kind == TapKind::Query) {
            plan.query_sites.push_back(a);
        } else {
            throw InputError("only residual and query sites can be injected: " + to_string(a));
        }
    }
    return plan;
}

template <typename T>
InjectionHook<T>::InjectionHook(FeatureBundle<T> bundle, InjectionPlan plan)
    : bundle_(std::move(bundle)),
      plan_(std::move(plan)),
      residual_(plan_.residual_sites.begin(), plan_.residual_sites.end()),
      query_(plan_.query_sites.begin(), plan_.query_sites.end()) {
    for (const auto& a : plan_.required_taps()) {
        if (!bundle_.contains(a)) throw InputError("feature bundle lacks injection site " + to_string(a));
    }
}

template <typename T>
BasicTensor<T> InjectionHook<T>::at_site(const TapAddress& site, const BasicTensor<T>& live) const {
    const bool residual = residual_.count(site) != 0;
    if (!residual && query_.count(site) == 0) return live;
    const BasicTensor<T>& stored_all = bundle_.at(site);
    const std::size_t frames = live.dim(0);
    Shape frame_shape = live.shape();
    frame_shape[0] = 1;
    const BasicTensor<T> stored = stored_all.dim(0) == 1 ? stored_all : slice(stored_all, 0, 0, 1);
    if (stored.shape() != frame_shape) {
        throw ShapeError("stored feature at " + to_string(site) + " has shape " + to_string(stored.shape()) +
                         ", live frame is " + to_string(frame_shape));
    }
    BasicTensor<T> first = stored;
    if (residual && plan_.debias) first = adain_patch(stored, slice(live, 0, 0, 1), plan_.patch_size);
    if (frames == 1) return first;
    return concat<T>({first, slice(live, 0, 1, frames)}, 0);
}

#define ANYI2V_INSTANTIATE(T)                                                                               \
    template BasicTensor<T> patchify<T>(const BasicTensor<T>&, std::size_t);                                \
    template BasicTensor<T> unpatchify<T>(const BasicTensor<T>&, std::size_t, std::size_t);                 \
    template BasicTensor<T> adain_patch<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, double); \
    template void InjectionPlan::validate<T>(const Backbone<T>&) const;                                     \
    template class InjectionHook<T>;

ANYI2V_INSTANTIATE(float)
ANYI2V_INSTANTIATE(double)

}  // namespace anyi2v
